"""Cross-modal alignment losses over intra-modal similarity matrices.

Each modality batch is mapped into a curved space, a pairwise similarity
matrix is built inside the batch, both matrices are Frobenius-normalised,
and the loss is the mean squared difference between them. Several
curvatures can be combined by averaging their per-curvature losses.

Geometry of each term is chosen by ``space``:

* ``hyperbolic`` -- clip into the Poincare ball, then either take cosines of
  the origin log-map images (``cosine-tangent``) or negated geodesic
  distances between ball points (``neg-geodesic-distance``).
* ``spherical`` -- rows scaled onto the sphere of radius ``1/sqrt(c)``; cosine
  or negated great-circle distance.
* ``euclidean`` -- raw rows; cosine or negated Euclidean distance.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import poincare
from .errors import ConfigError, DomainError

KERNELS = ("cosine-tangent", "neg-geodesic-distance")
SPACES = ("hyperbolic", "euclidean", "spherical")
CURVATURE_MODES = ("fixed", "single-adaptive", "multi-adaptive")

_SPACE_CODES = {"H": "hyperbolic", "E": "euclidean", "S": "spherical"}


@dataclass(frozen=True)
class AlignmentConfig:
    kernel: str = "neg-geodesic-distance"
    curvature_mode: str = "fixed"
    fixed_curvature: float = -0.2
    num_curvatures: int = 1
    space: str = "hyperbolic"
    xi: float = poincare.DEFAULT_XI
    # Per-term geometry for mixed-curvature runs, e.g. ("euclidean", "hyperbolic").
    geometries: tuple = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.space not in SPACES:
            raise ConfigError(f"unknown space {self.space!r}")
        if self.curvature_mode not in CURVATURE_MODES:
            raise ConfigError(f"unknown curvature mode {self.curvature_mode!r}")
        if self.num_curvatures < 1:
            raise ConfigError("num_curvatures must be >= 1")
        if self.curvature_mode != "multi-adaptive" and self.num_curvatures != 1:
            raise ConfigError("num_curvatures > 1 requires curvature_mode='multi-adaptive'")
        if self.geometries is not None:
            geos = tuple(parse_geometries(self.geometries))
            if len(geos) != self.num_curvatures:
                raise ConfigError(
                    f"{len(geos)} geometries given for {self.num_curvatures} curvatures"
                )
            object.__setattr__(self, "geometries", geos)
        if self.curvature_mode == "fixed":
            if self.space == "spherical" and not self.fixed_curvature > 0:
                raise ConfigError(f"spherical alignment needs c > 0, got {self.fixed_curvature}")
            _term_curvature(self.space, self.fixed_curvature)

    def term_spaces(self, n_terms):
        if self.geometries is not None:
            if len(self.geometries) != n_terms:
                raise ConfigError(
                    f"{len(self.geometries)} geometries for {n_terms} curvatures"
                )
            return self.geometries
        return (self.space,) * n_terms


def parse_geometries(spec):
    """Accept ``"E+H"`` style strings or sequences of space names."""
    if isinstance(spec, str):
        spec = spec.split("+")
    out = []
    for item in spec:
        item = item.strip()
        name = _SPACE_CODES.get(item.upper(), item)
        if name not in SPACES:
            raise ConfigError(f"unknown geometry {item!r}")
        out.append(name)
    return out


def _term_curvature(space, c):
    """Effective curvature of a term and d(effective)/d(c).

    Adaptive heads only emit negative values; a spherical term reuses the
    magnitude, a Euclidean term ignores it.
    """
    c = float(c)
    if space == "hyperbolic":
        if c >= 0:
            raise ConfigError(f"hyperbolic alignment needs c < 0, got {c}")
        return c, 1.0
    if space == "spherical":
        if c == 0:
            raise ConfigError("spherical alignment needs c != 0")
        return abs(c), float(np.sign(c))
    return 0.0, 0.0


def _as_batch(x):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"feature batch must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise DomainError("feature batch needs at least two rows")
    if not np.all(np.isfinite(x)):
        raise DomainError("feature batch contains non-finite entries")
    return x


# -- kernels ---------------------------------------------------------------


def _unit_rows(x):
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    nz = n > 0.0
    safe = np.where(nz, n, 1.0)
    return np.where(nz, x / safe, 0.0), safe, nz


def _cosine_matrix(x):
    u, _, _ = _unit_rows(x)
    m = u @ u.T
    np.fill_diagonal(m, 1.0)
    return m


def _cosine_matrix_vjp(x, g):
    u, n, nz = _unit_rows(x)
    g = g.copy()
    np.fill_diagonal(g, 0.0)
    gu = (g + g.T) @ u
    gx = (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / n
    return np.where(nz, gx, 0.0)


def _euclidean_distance_matrix(x):
    return cdist(x, x)


def _euclidean_distance_matrix_vjp(x, gd):
    d = cdist(x, x)
    live = d > 0.0
    w = np.where(live, gd / np.where(live, d, 1.0), 0.0)
    w = 0.5 * (w + w.T)
    # d_ij = |x_i - x_j|: each row collects sum_j w_ij (x_i - x_j), twice by symmetry.
    return 2.0 * (w.sum(axis=1)[:, None] * x - w @ x)


def _angle_matrix(x):
    return np.arccos(np.clip(_cosine_matrix(x), -1.0, 1.0))


def _angle_matrix_vjp(x, g):
    cos = np.clip(_cosine_matrix(x), -1.0, 1.0)
    sin2 = 1.0 - cos * cos
    live = sin2 > 1e-15
    gcos = np.where(live, -g / np.sqrt(np.where(live, sin2, 1.0)), 0.0)
    return _cosine_matrix_vjp(x, gcos)


# -- similarity ------------------------------------------------------------


def similarity_matrix(batch, c, kernel="cosine-tangent", space="hyperbolic", xi=poincare.DEFAULT_XI):
    """Raw pairwise similarity matrix of one modality batch.

    ``c`` is the effective curvature of the geometry: negative for
    ``hyperbolic``, positive for ``spherical``, ignored for ``euclidean``.
    """
    x = _as_batch(batch)
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    if space == "hyperbolic":
        p = poincare.project_to_ball(x, c, xi)
        if kernel == "cosine-tangent":
            return _cosine_matrix(poincare.log_map_origin(p, c))
        return -poincare.distance_matrix(p, c)
    if space == "spherical":
        if not c > 0:
            raise ConfigError(f"spherical similarity needs c > 0, got {c}")
        # Points on the radius-1/sqrt(c) sphere share the cosines of the raw rows.
        if kernel == "cosine-tangent":
            return _cosine_matrix(x)
        return -_angle_matrix(x) / np.sqrt(c)
    if space == "euclidean":
        if kernel == "cosine-tangent":
            return _cosine_matrix(x)
        return -_euclidean_distance_matrix(x)
    raise ConfigError(f"unknown space {space!r}")


def similarity_matrix_vjp(batch, c, kernel, space, grad, xi=poincare.DEFAULT_XI):
    """Cotangents ``(grad_batch, grad_c)`` of :func:`similarity_matrix`."""
    x = _as_batch(batch)
    g = np.asarray(grad, dtype=np.float64)
    if space == "hyperbolic":
        p = poincare.project_to_ball(x, c, xi)
        if kernel == "cosine-tangent":
            t = poincare.log_map_origin(p, c)
            gt = _cosine_matrix_vjp(t, g)
            gp, _ = poincare.log_map_origin_vjp(p, c, gt)
            gx, _ = poincare.project_to_ball_vjp(x, c, gp, xi)
            # Both maps rescale rows radially and cosines ignore radial
            # changes, so the curvature cotangent vanishes identically.
            return gx, 0.0
        gp, gc_dist = poincare.distance_matrix_vjp(p, c, -g)
        gx, gc_proj = poincare.project_to_ball_vjp(x, c, gp, xi)
        return gx, gc_proj + gc_dist
    if space == "spherical":
        if kernel == "cosine-tangent":
            return _cosine_matrix_vjp(x, g), 0.0
        theta = _angle_matrix(x)
        gx = _angle_matrix_vjp(x, -g / np.sqrt(c))
        gc = float(np.sum(g * theta)) * 0.5 * c**-1.5
        return gx, gc
    if kernel == "cosine-tangent":
        return _cosine_matrix_vjp(x, g), 0.0
    return _euclidean_distance_matrix_vjp(x, -g), 0.0


def normalize_matrix(m):
    """Divide by the Frobenius norm."""
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m)
    if norm <= 1e-12:
        raise ConfigError("similarity matrix has zero Frobenius norm (all points coincide?)")
    return m / norm


def normalize_matrix_vjp(m, grad):
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m)
    if norm <= 1e-12:
        raise ConfigError("similarity matrix has zero Frobenius norm (all points coincide?)")
    mn = m / norm
    return (grad - mn * np.sum(mn * grad)) / norm


# -- losses ----------------------------------------------------------------


def _check_pair(phi_v, phi_a):
    v = _as_batch(phi_v)
    a = _as_batch(phi_a)
    if v.shape[0] != a.shape[0]:
        raise DomainError(f"batch size mismatch: {v.shape[0]} vs {a.shape[0]}")
    return v, a


def _term_loss(v, a, c_eff, kernel, space, xi):
    mv = normalize_matrix(similarity_matrix(v, c_eff, kernel, space, xi))
    ma = normalize_matrix(similarity_matrix(a, c_eff, kernel, space, xi))
    n = v.shape[0]
    return float(np.sum((mv - ma) ** 2)) / n**2


def alignment_loss(phi_v, phi_a, c, cfg=None, space=None):
    """Mean squared difference of normalised similarity matrices at one curvature."""
    cfg = cfg or AlignmentConfig()
    v, a = _check_pair(phi_v, phi_a)
    space = space or cfg.space
    c_eff, _ = _term_curvature(space, c)
    return _term_loss(v, a, c_eff, cfg.kernel, space, cfg.xi)


def multi_curvature_loss(phi_v, phi_a, curvatures, cfg=None):
    """Average of :func:`alignment_loss` over a list of curvatures."""
    cfg = cfg or AlignmentConfig()
    curvatures = list(np.atleast_1d(np.asarray(curvatures, dtype=np.float64)))
    if not curvatures:
        raise ConfigError("curvature list is empty")
    v, a = _check_pair(phi_v, phi_a)
    spaces = cfg.term_spaces(len(curvatures))
    terms = []
    for c, space in zip(curvatures, spaces):
        c_eff, _ = _term_curvature(space, c)
        terms.append(_term_loss(v, a, c_eff, cfg.kernel, space, cfg.xi))
    # Shifted mean: exact when all terms agree (N_c copies of one curvature).
    return terms[0] + sum(t - terms[0] for t in terms) / len(terms)


def total_loss(base, align, weight=1.0):
    """Base loss plus the (optionally weighted) alignment loss.

    Non-finite inputs propagate; the training loop decides how to abort.
    """
    return float(base) + weight * float(align)


def loss_vjp(phi_v, phi_a, curvatures, cfg=None, cotangent=1.0):
    """Gradients of :func:`multi_curvature_loss`.

    Returns ``(grad_phi_v, grad_phi_a, grad_curvatures)`` scaled by
    ``cotangent``.
    """
    cfg = cfg or AlignmentConfig()
    curvatures = list(np.atleast_1d(np.asarray(curvatures, dtype=np.float64)))
    if not curvatures:
        raise ConfigError("curvature list is empty")
    v, a = _check_pair(phi_v, phi_a)
    spaces = cfg.term_spaces(len(curvatures))
    n = v.shape[0]
    scale = float(cotangent) / len(curvatures)
    gv = np.zeros_like(v)
    ga = np.zeros_like(a)
    gcs = []
    for c, space in zip(curvatures, spaces):
        c_eff, dc_eff = _term_curvature(space, c)
        sv = similarity_matrix(v, c_eff, cfg.kernel, space, cfg.xi)
        sa = similarity_matrix(a, c_eff, cfg.kernel, space, cfg.xi)
        diff = normalize_matrix(sv) - normalize_matrix(sa)
        g_mv = (2.0 * scale / n**2) * diff
        gsv = normalize_matrix_vjp(sv, g_mv)
        gsa = normalize_matrix_vjp(sa, -g_mv)
        gxv, gcv = similarity_matrix_vjp(v, c_eff, cfg.kernel, space, gsv, cfg.xi)
        gxa, gca = similarity_matrix_vjp(a, c_eff, cfg.kernel, space, gsa, cfg.xi)
        gv += gxv
        ga += gxa
        gcs.append((gcv + gca) * dc_eff)
    return gv, ga, np.asarray(gcs, dtype=np.float64)
