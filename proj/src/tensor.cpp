// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mcbmn/error.hpp"

namespace mcbmn {

std::string_view error_class(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "DIMENSION_MISMATCH";
    case ErrorCode::kDomainError: return "DOMAIN_ERROR";
    case ErrorCode::kNonFinite: return "NON_FINITE";
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::kGraphError: return "GRAPH_ERROR";
    case ErrorCode::kDatasetNotFound: return "DATASET_NOT_FOUND";
    case ErrorCode::kDatasetInvalid: return "DATASET_INVALID";
    case ErrorCode::kConfigError: return "CONFIG_ERROR";
    case ErrorCode::kCheckpointMismatch: return "CHECKPOINT_MISMATCH";
    case ErrorCode::kIoError: return "IO_ERROR";
  }
  return "UNKNOWN";
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) fail(ErrorCode::kInvalidArgument, "tensor shape must have rank >= 1");
  for (auto extent : shape) {
    if (extent == 0) {
      fail(ErrorCode::kInvalidArgument, "tensor extents must be positive, got " + shape_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  if (!std::isfinite(fill)) fail(ErrorCode::kNonFinite, "tensor fill value is not finite");
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    fail(ErrorCode::kDimensionMismatch, "shape " + shape_string(shape_) + " needs " +
                                            std::to_string(shape_size(shape_)) + " values, got " +
                                            std::to_string(data_.size()));
  }
  require_finite(*this, "tensor construction");
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> values;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) fail(ErrorCode::kDimensionMismatch, "ragged matrix literal");
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() != 2) fail(ErrorCode::kDimensionMismatch, "rows() needs rank <= 2, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() != 2) fail(ErrorCode::kDimensionMismatch, "cols() needs rank <= 2, got " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) fail(ErrorCode::kDimensionMismatch, "item() on non-scalar " + shape_string(shape_));
  return data_[0];
}

std::vector<double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return {data_.begin() + static_cast<std::ptrdiff_t>(r * c),
          data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimensionMismatch,
         std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) fail(ErrorCode::kNonFinite, std::string(where) + ": non-finite value");
}

}  // namespace mcbmn
