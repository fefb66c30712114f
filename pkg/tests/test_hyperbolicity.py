import math

import numpy as np
import pytest

import oracles
from hypav import hyperbolicity as hy
from hypav.errors import DomainError

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def star_tree(n_leaves=4, arm=1.0):
    d = np.full((n_leaves, n_leaves), 2 * arm)
    np.fill_diagonal(d, 0.0)
    return d


def tree_cloud(rng, depth=4, branching=3, factor=0.45):
    """Leaves of a balanced tree drawn in the plane with shrinking branches."""
    pts = [np.zeros(2)]
    length = 1.0
    for _ in range(depth):
        nxt = []
        for p in pts:
            base = rng.uniform(0, 2 * math.pi)
            for b in range(branching):
                ang = base + 2 * math.pi * b / branching
                nxt.append(p + length * np.array([math.cos(ang), math.sin(ang)]))
        pts = nxt
        length *= factor
    return np.array(pts)


def test_pairwise_examples():
    d = hy.pairwise_distances(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert d[0, 1] == 0.0
    d = hy.pairwise_distances(SQUARE)
    assert sorted(np.round(d[0, 1:], 12)) == [1.0, 1.0, round(math.sqrt(2), 12)]


def test_poincare_metric_checks_domain():
    with pytest.raises(DomainError):
        hy.pairwise_distances(np.array([[0.0, 0.0], [2.0, 0.0]]), "poincare", -1.0)
    d = hy.pairwise_distances(np.array([[0.0, 0.0], [0.5, 0.0]]), "poincare", -1.0)
    assert d[0, 1] == pytest.approx(2 * math.atanh(0.5), abs=1e-14)


def test_star_tree_is_zero_hyperbolic():
    assert hy.gromov_delta(star_tree()) == 0.0


def test_square_matches_exhaustive_oracles():
    d = hy.pairwise_distances(SQUARE)
    delta = hy.gromov_delta(d)
    # same arithmetic (Gromov products at the base): bit-identical
    assert delta == oracles.four_point_delta_based(d.tolist())
    # sum-of-pairs form rounds differently: equal to the last ulp
    assert delta == pytest.approx(oracles.four_point_delta_all(d.tolist()), abs=2e-16)
    assert hy.delta_rel(SQUARE) == pytest.approx(2 * delta / math.sqrt(2), abs=1e-15)


def test_max_min_matches_base_anchored_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(4, 13))
        x = rng.normal(size=(n, int(rng.integers(2, 6))))
        d = hy.pairwise_distances(x)
        assert hy.gromov_delta(d) == oracles.four_point_delta_based(d.tolist())


def test_base_dependence_bounded_by_factor_two():
    rng = np.random.default_rng(1)
    d = hy.pairwise_distances(rng.normal(size=(10, 3)))
    full = oracles.four_point_delta_all(d.tolist())
    for b in range(10):
        based = hy.gromov_delta(d, b)
        assert based <= 2 * full + 1e-12 and full <= 2 * based + 1e-12


def test_tree_metric_delta_rel_zero():
    # path metric on a caterpillar tree: leaves hang off a spine
    edges = {(0, 1): 1.0, (1, 2): 2.0, (2, 3): 1.5, (1, 4): 0.7, (2, 5): 0.3, (3, 6): 1.1}
    n = 7
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for (i, j), w in edges.items():
        d[i, j] = d[j, i] = w
    for m in range(n):
        d = np.minimum(d, d[:, m : m + 1] + d[m : m + 1, :])
    assert hy.gromov_delta(d) == pytest.approx(0.0, abs=1e-12)
    for b in range(n):
        assert hy.gromov_delta(d, b) == pytest.approx(0.0, abs=1e-12)


def test_scale_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 4))
    ref = hy.delta_rel(x)
    for alpha in (1e-3, 0.5, 7.0, 1e4):
        assert hy.delta_rel(alpha * x) == pytest.approx(ref, abs=1e-9)


def test_tree_clouds_beat_uniform():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        tree = tree_cloud(rng)
        span = np.ptp(tree, axis=0).max()
        uniform = rng.uniform(0, span, size=tree.shape)
        assert hy.delta_rel(tree) < hy.delta_rel(uniform)


def test_coincident_points_are_an_error():
    with pytest.raises(DomainError):
        hy.delta_rel(np.ones((5, 3)))


def test_subsampling_path(monkeypatch):
    # shrink the thresholds; the mechanism is what is under test
    monkeypatch.setattr(hy, "SUBSAMPLE_ABOVE", 200)
    monkeypatch.setattr(hy, "SUBSAMPLE_SIZE", 150)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(hy.SUBSAMPLE_ABOVE + 1, 3))
    mean, std, runs = hy.delta_rel_stats(x, seed=4)
    assert runs == 3 and std >= 0.0 and 0.0 <= mean <= 1.0
    assert hy.delta_rel_stats(x, seed=4) == (mean, std, runs)


def test_max_min_product_equals_dense():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(30, 20))
    b = rng.normal(size=(20, 25))
    dense = np.minimum(a[:, :, None], b[None, :, :]).max(axis=1)
    assert np.array_equal(hy.max_min_product(a, b), dense)
