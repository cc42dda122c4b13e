import math

import numpy as np
import pytest

import kcdp


def test_parse_triples_examples():
    assert kcdp.parse_triples("a man is hugging a woman") == [("man", "hugging", "woman")]
    assert kcdp.parse_triples("a girl is cheerful") == [("girl", "is", "cheerful")]
    assert kcdp.parse_triples("") == []


def test_route_is_sparse_and_normalized():
    w = kcdp.route([1.0, 0.0, -1.0, -2.0], 2)
    assert w[0] == pytest.approx(0.7311, abs=1e-4)
    assert w[1] == pytest.approx(0.2689, abs=1e-4)
    assert w[2] == 0.0 and w[3] == 0.0


def test_add_noise_closed_form():
    ab = kcdp.alpha_bar()
    z0 = np.full((2, 3), 2.0)
    eps = np.ones((2, 3))
    zt = kcdp.add_noise(z0, 10, eps)
    want = math.sqrt(ab[9]) * 2.0 + math.sqrt(1.0 - ab[9])
    assert np.allclose(zt, want)


def test_config_defaults_and_validation():
    cfg = kcdp.default_config()
    assert cfg["finetune_strategy"] == "lora"
    assert cfg["classifier"] == "moe"
    with pytest.raises(Exception):
        kcdp.config_hash({"no_such_key": 1})
    # the hash ignores optimisation settings
    assert kcdp.config_hash({"lr": 0.1}) == kcdp.config_hash({"lr": 0.2})
    assert kcdp.config_hash({"lora_rank": 2}) != kcdp.config_hash({})


def test_train_evaluate_round_trip(tmp_path):
    n = kcdp.generate_data(tmp_path / "data", {"n_source": 32, "n_target": 32, "n_test": 16, "seed": 4})
    assert n == 96
    seen = []
    history = kcdp.train(tmp_path / "data", tmp_path / "run", {"epochs": 2, "batch_size": 8, "lr": 1e-3},
                         on_epoch=seen.append)
    assert [h["epoch"] for h in history] == [1, 2]
    assert seen == history
    assert (tmp_path / "run" / "metrics.csv").exists()
    m = kcdp.evaluate(tmp_path / "run" / "model.ckpt", tmp_path / "data")
    assert m["n"] == 16
    assert 0.0 <= m["accuracy"] <= 1.0
    assert sum(m["support"]) == 16
    labels = kcdp.pseudo_labels(tmp_path / "run" / "model.ckpt", tmp_path / "data")
    assert len(labels) == 32
    for label, scores in labels:
        assert len(scores) == 6
        assert scores[label] == max(scores)
