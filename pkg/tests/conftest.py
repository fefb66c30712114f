import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x.copy())
        x[i] = old - h
        fm = f(x.copy())
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ball_points(rng, n, d, c, frac=0.9):
    """Random points strictly inside the ball of curvature ``c``."""
    x = rng.normal(size=(n, d))
    r = frac * rng.uniform(0.05, 1.0, size=(n, 1)) / np.sqrt(abs(c))
    return x / np.linalg.norm(x, axis=1, keepdims=True) * r


def perfect_fixture(per_class=3):
    """A dataset of one-hot features and weights that classify it perfectly.

    Features, word vectors and every layer are identity-like; gates are
    saturated so the cross-fusion passes each branch through unchanged.
    """
    from hypav import data, model

    tax = data.Taxonomy(["S0", "S1"], [("S0/C0", 0), ("S0/C1", 0), ("S1/C0", 1), ("S1/C1", 1)])
    k = tax.num_classes
    labels = np.repeat(np.arange(k), per_class)
    feats = np.eye(k)[labels]
    seen = np.array([True, False, True, False])
    split = np.array(["test"] * len(labels), dtype="<U5")
    split[np.flatnonzero(seen[labels])[::2]] = "train"
    bundle = data.DatasetBundle(feats, feats.copy(), np.eye(k), labels, tax, seen, split)
    eye = np.eye(k)
    t = {
        "enc_v_w": 20 * eye, "enc_v_b": np.zeros(k), "enc_a_w": 20 * eye, "enc_a_b": np.zeros(k),
        "fuse_av": np.zeros((k, k)), "fuse_va": np.zeros((k, k)),
        "gate_v": np.array(50.0), "gate_a": np.array(50.0),
        "proj_v_w": eye, "proj_v_b": np.zeros(k), "proj_a_w": eye, "proj_a_b": np.zeros(k),
        "word_w": eye, "word_b": np.zeros(k),
    }
    return bundle, model.ModelParams(t)
