# Copyright 2026 The mcbmn Authors
# SPDX-License-Identifier: Apache-2.0

import math

import pytest

import mcbmn


@pytest.fixture
def run_config(tmp_path):
    data = tmp_path / "synth.jsonl"
    mcbmn.gen_data(str(data), 12, 5)
    cfg = mcbmn.default_config()
    cfg["paths"] = {"dataset": str(data), "out_dir": str(tmp_path / "run")}
    cfg["model"].update(hidden_dim=8, embed_dim=8, encoder_hidden=8)
    cfg["mumc"].update(train_samples=2, eval_samples=3)
    cfg["optimizer"].update(epochs=2, batch_size=4)
    cfg["eval"].update(samples=3, max_len=8)
    cfg["variance"].update(examples=2, samples=3)
    return cfg


def test_metrics_match_hand_values():
    assert mcbmn.bleu([1, 2, 3, 4], [[1, 2, 9, 4]], 1) == pytest.approx(0.75)
    assert mcbmn.bleu([1, 2], [[1, 2, 3, 4]], 1) == pytest.approx(math.exp(-1))
    assert mcbmn.rouge_l([5, 6], [[5, 6]]) == pytest.approx(1.0)
    assert mcbmn.cider([[5, 6], [7, 8]], [[[5, 6]], [[7, 8]]]) == pytest.approx([10.0, 10.0])


def test_config_round_trip_and_presets():
    cfg = mcbmn.default_config()
    assert mcbmn.normalize_config(cfg) == cfg
    assert "MC-BMN3" in mcbmn.presets()
    normalized = mcbmn.normalize_config({"preset": "MC-SMix"})
    assert normalized["combiner"] == "mixture"


def test_unknown_key_raises_config_error():
    with pytest.raises(mcbmn.Error, match="^CONFIG_ERROR: "):
        mcbmn.normalize_config({"modle": {}})


def test_missing_dataset_raises(run_config, tmp_path):
    run_config["paths"]["dataset"] = str(tmp_path / "absent.jsonl")
    with pytest.raises(mcbmn.Error, match="^DATASET_NOT_FOUND: "):
        mcbmn.train(run_config)


def test_train_eval_sample_variance(run_config, tmp_path):
    result = mcbmn.train(run_config)
    assert len(result["curve"]) == 2
    assert all(math.isfinite(e["train_loss"]) for e in result["curve"])
    assert (tmp_path / "run" / "checkpoint.json").exists()

    report = mcbmn.evaluate(run_config, split="all")
    assert len(report["bleu"]) == 4
    assert len(report["generations"]) == 12
    assert 0.0 <= report["bleu"][0] <= 100.0

    samples = mcbmn.sample(run_config, split="all", samples=3)
    assert len(samples) == 12
    assert all(len(s["samples"]) == 3 for s in samples)
    assert all(s["predictive"] >= 0.0 for s in samples)

    var = mcbmn.variance(run_config)
    assert len(var) <= 2
    assert all(v["norm_variance"] >= 0.0 for v in var)


def test_training_is_reproducible(run_config, tmp_path):
    first = mcbmn.train(run_config)
    run_config["paths"]["out_dir"] = str(tmp_path / "again")
    assert mcbmn.train(run_config) == first
