"""Gromov delta-hyperbolicity of finite point sets.

``delta`` is computed from Gromov products at a fixed base point through the
(max, min) matrix product; ``delta_rel = 2 * delta / diameter`` lies in
[0, 1] and is smaller for more tree-like sets.
"""

import numpy as np
from scipy.spatial.distance import cdist

from . import poincare
from .errors import DomainError

SUBSAMPLE_ABOVE = 2048
SUBSAMPLE_SIZE = 1500
SUBSAMPLE_REPEATS = 3


def pairwise_distances(x, metric="euclidean", c=None):
    """Dense distance matrix under ``"euclidean"`` or ``"poincare"`` (needs ``c``)."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"expected a 2-D point set, got shape {x.shape}")
    if metric == "euclidean":
        d = cdist(x, x)
    elif metric == "poincare":
        if c is None:
            raise DomainError("poincare metric needs a curvature")
        d = poincare.distance_matrix(x, c)
    else:
        raise DomainError(f"unknown metric {metric!r}")
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def gromov_products(d, base_index=0):
    d = np.asarray(d, dtype=np.float64)
    row = d[base_index][None, :]
    col = d[:, base_index][:, None]
    return 0.5 * ((col + row) - d)


def max_min_product(a, b=None):
    """``out[i, j] = max_k min(a[i, k], b[k, j])``.

    Accumulates one rank-one (min) update per ``k`` in place, which keeps the
    working set at two N x N buffers. min and max are exact, so the result
    does not depend on the order of ``k``.
    """
    b = a if b is None else b
    if a.shape[1] != b.shape[0]:
        raise DomainError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    out = np.full((a.shape[0], b.shape[1]), -np.inf)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.minimum(a[:, k, None], b[None, k, :], out=tmp)
        np.maximum(out, tmp, out=out)
    return out


def gromov_delta(d, base_index=0):
    """delta = max_ij ((A (x) A)_ij - A_ij) with A the Gromov products at the base."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DomainError("distance matrix must be square")
    if not 0 <= base_index < d.shape[0]:
        raise DomainError(f"base_index {base_index} out of range")
    a = gromov_products(d, base_index)
    return float(np.max(max_min_product(a) - a))


def _delta_rel_exact(x, metric, c, base_index):
    d = pairwise_distances(x, metric, c)
    diam = d.max()
    if diam <= 0.0:
        raise DomainError("delta_rel undefined: all points coincide")
    return 2.0 * gromov_delta(d, base_index) / diam


def delta_rel_stats(x, metric="euclidean", c=None, base_index=0, seed=0):
    """Returns ``(mean, std, n_runs)``.

    Sets larger than 2048 points are subsampled to 1500 points three times
    with a seeded generator; smaller sets give one exact value with std 0.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if len(x) <= SUBSAMPLE_ABOVE:
        return _delta_rel_exact(x, metric, c, base_index), 0.0, 1
    rng = np.random.default_rng(seed)
    vals = [
        _delta_rel_exact(x[rng.choice(len(x), SUBSAMPLE_SIZE, replace=False)], metric, c, base_index)
        for _ in range(SUBSAMPLE_REPEATS)
    ]
    return float(np.mean(vals)), float(np.std(vals)), SUBSAMPLE_REPEATS


def delta_rel(x, metric="euclidean", c=None, base_index=0, seed=0):
    """Relative hyperbolicity ``2 delta / diam``."""
    return delta_rel_stats(x, metric, c, base_index, seed)[0]
