# Copyright 2026 The mcbmn Authors
# SPDX-License-Identifier: Apache-2.0
"""Multi-cue question generation with Bayesian moderation.

Configs are plain dicts with the same layout as the CLI's JSON configs.
"""

import json

from . import _core
from ._core import Error, bleu, corpus_bleu, cider, gen_data, presets, rouge_l

__all__ = [
    "Error",
    "bleu",
    "cider",
    "corpus_bleu",
    "default_config",
    "evaluate",
    "gen_data",
    "normalize_config",
    "presets",
    "rouge_l",
    "sample",
    "train",
    "variance",
]


def default_config():
    return json.loads(_core.default_config())


def normalize_config(config):
    return json.loads(_core.normalize_config(json.dumps(config)))


def train(config):
    """Trains into config["paths"]["out_dir"]; returns best epoch and loss curve."""
    return json.loads(_core.train(json.dumps(config)))


def evaluate(config, checkpoint="", split="val"):
    return json.loads(_core.evaluate(json.dumps(config), checkpoint, split))


def sample(config, checkpoint="", split="val", samples=10):
    return json.loads(_core.sample(json.dumps(config), checkpoint, split, samples))


def variance(config, checkpoint=""):
    return json.loads(_core.variance(json.dumps(config), checkpoint))
