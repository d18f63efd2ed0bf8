// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

namespace mcbmn {

/// Counter-based random stream (Philox4x32-10 keyed by the master seed).
///
/// A draw is a pure function of (seed, stream, counter), so two streams with
/// equal coordinates produce bitwise-identical sequences and child streams
/// obtained through split() never share state with their parent. Monte-Carlo
/// samples that each own a child stream can be evaluated in any order.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent child stream; the parent's counter is not consumed.
  RngStream split(std::uint64_t child) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  /// Standard normal via Box-Muller (one uniform pair per draw).
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  bool operator==(const RngStream&) const = default;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mcbmn
