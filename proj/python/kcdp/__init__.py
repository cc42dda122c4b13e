"""Python front end for the kcdp C++ core.

Configs and dataset specs are plain dicts; unknown keys are rejected by the
core with ValueError-like RuntimeErrors.
"""

import json
from pathlib import Path

from . import _kcdp
from ._kcdp import add_noise, alpha_bar, emotion_names, parse_triples, route, tokenize

__all__ = [
    "add_noise",
    "alpha_bar",
    "config_hash",
    "default_config",
    "emotion_names",
    "evaluate",
    "generate_data",
    "parse_triples",
    "pseudo_labels",
    "route",
    "tokenize",
    "train",
]


def default_config():
    return json.loads(_kcdp.default_config_json())


def _config_json(config):
    # round-trip through the core so defaults are filled and bad keys rejected
    return _kcdp.normalize_config_json(json.dumps(config or {}))


def config_hash(config, labels=None):
    return _kcdp.config_hash(_config_json(config), list(labels or emotion_names()))


def generate_data(out, spec=None, threads=1):
    """Write a corpus to `out`; returns the number of samples."""
    return _kcdp.generate_data(json.dumps(spec or {}), Path(out), threads)


def train(data, out, config=None, on_epoch=None):
    """Train on a corpus directory, writing metrics.csv and model.ckpt to `out`.

    Returns the per-epoch metrics as a list of dicts.
    """
    return _kcdp.train(_config_json(config), Path(data), Path(out), on_epoch)


def evaluate(ckpt, data, split="target_test"):
    return _kcdp.evaluate(Path(ckpt), Path(data), split)


def pseudo_labels(ckpt, data, split="target_train"):
    """List of (label, scores) per sample of the split."""
    return _kcdp.pseudo_labels(Path(ckpt), Path(data), split)
