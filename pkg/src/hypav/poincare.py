r"""Poincare-ball primitives with hand-written vector-Jacobian products.

Curvature follows the sign convention ``c < 0`` for hyperbolic space; the
ball has radius :math:`1/\sqrt{|c|}`. Every map operates row-wise on the last
axis, so ``x`` may be a single vector or an ``(N, d)`` batch.

Each forward op ``f`` has a companion ``f_vjp`` that takes the same inputs
plus an upstream cotangent ``grad`` (shaped like the output) and returns the
cotangents of the inputs, curvature last. Curvature cotangents are summed
over the batch, because a batch shares one curvature.
"""

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError, NumericalDomainError

__all__ = [
    "DEFAULT_XI",
    "check_curvature",
    "clip_radius",
    "conformal_factor",
    "conformal_factor_vjp",
    "project_to_ball",
    "project_to_ball_vjp",
    "mobius_add",
    "mobius_add_vjp",
    "log_map_origin",
    "log_map_origin_vjp",
    "exp_map_origin",
    "exp_map_origin_vjp",
    "geodesic_distance",
    "geodesic_distance_vjp",
    "distance_matrix",
    "distance_matrix_vjp",
]

DEFAULT_XI = 1e-5
MIN_ABS_CURVATURE = 1e-6
MAX_ABS_CURVATURE = 10.0

# Below this squared argument the closed forms lose digits; switch to series.
_SERIES_T2 = 1e-4
# tanh(15) = 1 - 1.9e-13, keeps exp-map images strictly inside the ball.
_EXP_T_MAX = 15.0
_MOBIUS_DEN_MIN = 1e-15
# Below this arcosh argument the curvature slope cancels; switch to series.
_ARCOSH_SERIES_Z = 1e-3


def check_curvature(c):
    """Validate a hyperbolic curvature and return ``|c|``."""
    c = float(c)
    if not np.isfinite(c) or c >= 0.0:
        raise DomainError(f"hyperbolic maps need c < 0, got {c!r}")
    k = -c
    # Small relative slack so that c = -1e-6 written as a decimal is accepted.
    if not (MIN_ABS_CURVATURE * (1 - 1e-12) <= k <= MAX_ABS_CURVATURE * (1 + 1e-12)):
        raise DomainError(
            f"|c| must lie in [{MIN_ABS_CURVATURE:g}, {MAX_ABS_CURVATURE:g}], got {k!r}"
        )
    return k


def _check_xi(xi):
    if not (0.0 < xi <= 1e-2):
        raise DomainError(f"xi must lie in (0, 1e-2], got {xi!r}")


def _as_float(x):
    return np.asarray(x, dtype=np.float64)


def _sqnorm(x):
    return np.sum(x * x, axis=-1, keepdims=True)


def _dot(x, y):
    return np.sum(x * y, axis=-1, keepdims=True)


def _atanh_ratio(t):
    """artanh(t) / t with the removable singularity at 0 filled in."""
    t = np.asarray(t, dtype=np.float64)
    safe = np.where(t == 0.0, 0.5, t)
    return np.where(t == 0.0, 1.0, np.arctanh(safe) / safe)


def _atanh_ratio_slope(t2):
    """(1/(1-t^2) - artanh(t)/t) / t^2 as a function of t^2."""
    t2 = np.asarray(t2, dtype=np.float64)
    small = t2 < _SERIES_T2
    series = 2 / 3 + t2 * (4 / 5 + t2 * (6 / 7 + t2 * (8 / 9)))
    ts = np.sqrt(np.where(small, 0.25, t2))
    direct = (1.0 / (1.0 - ts * ts) - np.arctanh(ts) / ts) / (ts * ts)
    return np.where(small, series, direct)


def _tanh_ratio(t):
    t = np.asarray(t, dtype=np.float64)
    safe = np.where(t == 0.0, 1.0, t)
    return np.where(t == 0.0, 1.0, np.tanh(safe) / safe)


def _tanh_ratio_slope(t2):
    """(sech^2(t) - tanh(t)/t) / t^2 as a function of t^2."""
    t2 = np.asarray(t2, dtype=np.float64)
    small = t2 < _SERIES_T2
    series = -2 / 3 + t2 * (8 / 15 + t2 * (-34 / 105 + t2 * (496 / 2835)))
    ts = np.sqrt(np.where(small, 1.0, t2))
    direct = (1.0 / np.cosh(ts) ** 2 - np.tanh(ts) / ts) / (ts * ts)
    return np.where(small, series, direct)


def clip_radius(c, xi=DEFAULT_XI):
    """Norm at which :func:`project_to_ball` rescales, ``(1 - xi)/sqrt(|c|)``."""
    return (1.0 - xi) / np.sqrt(check_curvature(c))


def conformal_factor(z, c):
    r"""Conformal factor :math:`\lambda_c(z) = 2 / (1 - |c|\,\|z\|^2)`."""
    k = check_curvature(c)
    z = _as_float(z)
    denom = 1.0 - k * np.sum(z * z, axis=-1)
    if np.any(denom <= 0.0):
        raise DomainError("conformal factor requested on or outside the ball boundary")
    return 2.0 / denom


def conformal_factor_vjp(z, c, grad):
    k = check_curvature(c)
    z = _as_float(z)
    n2 = np.sum(z * z, axis=-1)
    denom = 1.0 - k * n2
    if np.any(denom <= 0.0):
        raise DomainError("conformal factor requested on or outside the ball boundary")
    g = np.asarray(grad, dtype=np.float64) * 2.0 / denom**2
    grad_z = (2.0 * k * g)[..., None] * z
    grad_k = np.sum(g * n2)
    return grad_z, -grad_k


def project_to_ball(x, c, xi=DEFAULT_XI):
    """Clip rows of ``x`` into the ball, rescaling those beyond the clip radius.

    Rows with norm at most ``(1 - xi)/sqrt(|c|)`` are returned unchanged; the
    others keep their direction and get exactly that norm.
    """
    _check_xi(xi)
    r = clip_radius(c, xi)
    x = _as_float(x)
    n = np.sqrt(_sqnorm(x))
    outside = n > r
    scale = np.where(outside, r / np.where(outside, n, 1.0), 1.0)
    return x * scale


def project_to_ball_vjp(x, c, grad, xi=DEFAULT_XI):
    _check_xi(xi)
    k = check_curvature(c)
    r = (1.0 - xi) / np.sqrt(k)
    x = _as_float(x)
    g = _as_float(grad)
    n = np.sqrt(_sqnorm(x))
    outside = n > r
    safe_n = np.where(outside, n, 1.0)
    u = x / safe_n
    ug = _dot(u, g)
    grad_x = np.where(outside, (r / safe_n) * (g - u * ug), g)
    # dr/dk = -r / (2k); the curvature enters only through r.
    grad_k = np.sum(np.where(outside, ug, 0.0)) * (-r / (2.0 * k))
    return grad_x, -grad_k


def _mobius_terms(x, y, k):
    xy = _dot(x, y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    a = 1.0 + 2.0 * k * xy + k * y2
    b = 1.0 - k * x2
    den = 1.0 + 2.0 * k * xy + k * k * x2 * y2
    if np.any(den < _MOBIUS_DEN_MIN):
        raise NumericalDomainError("Mobius addition denominator below 1e-15")
    return xy, x2, y2, a, b, den


def mobius_add(x, y, c):
    r"""Mobius addition :math:`x \oplus_c y` on the Poincare ball."""
    k = check_curvature(c)
    x = _as_float(x)
    y = _as_float(y)
    _, _, _, a, b, den = _mobius_terms(x, y, k)
    return (a * x + b * y) / den


def mobius_add_vjp(x, y, c, grad):
    k = check_curvature(c)
    x = _as_float(x)
    y = _as_float(y)
    g = _as_float(grad)
    xy, x2, y2, a, b, den = _mobius_terms(x, y, k)
    out = (a * x + b * y) / den
    g_num = g / den
    g_den = -_dot(g, out) / den
    gnx = _dot(g_num, x)
    gny = _dot(g_num, y)
    grad_x = (
        a * g_num
        + 2.0 * k * gnx * y
        - 2.0 * k * gny * x
        + g_den * (2.0 * k * y + 2.0 * k * k * y2 * x)
    )
    grad_y = (
        b * g_num
        + gnx * (2.0 * k * x + 2.0 * k * y)
        + g_den * (2.0 * k * x + 2.0 * k * k * x2 * y)
    )
    grad_k = np.sum(
        gnx * (2.0 * xy + y2) - gny * x2 + g_den * (2.0 * xy + 2.0 * k * x2 * y2)
    )
    return grad_x, grad_y, -grad_k


def _check_inside(n, k, what):
    if np.any(np.sqrt(k) * n >= 1.0):
        raise DomainError(f"{what}: point on or outside the ball boundary")


def log_map_origin(x, c):
    """Logarithmic map at the origin.

    Returns ``artanh(sqrt|c| * |x|) / (sqrt|c| * |x|) * x``; zero rows map to
    zero. Directions are preserved exactly.
    """
    k = check_curvature(c)
    x = _as_float(x)
    n = np.sqrt(_sqnorm(x))
    _check_inside(n, k, "log_map_origin")
    return _atanh_ratio(np.sqrt(k) * n) * x


def log_map_origin_vjp(x, c, grad):
    k = check_curvature(c)
    x = _as_float(x)
    g = _as_float(grad)
    n2 = _sqnorm(x)
    _check_inside(np.sqrt(n2), k, "log_map_origin")
    t2 = k * n2
    f = _atanh_ratio(np.sqrt(t2))
    h = _atanh_ratio_slope(t2)
    xg = _dot(x, g)
    grad_x = f * g + (k * h * xg) * x
    grad_k = np.sum(xg * n2 * h) / 2.0
    return grad_x, -grad_k


def exp_map_origin(v, c):
    """Exponential map at the origin, inverse of :func:`log_map_origin`."""
    k = check_curvature(c)
    v = _as_float(v)
    s = np.sqrt(k)
    n = np.sqrt(_sqnorm(v))
    t = s * n
    # Saturate so that the image stays strictly inside the ball.
    big = t > _EXP_T_MAX
    scale = np.where(big, np.tanh(_EXP_T_MAX) / (s * np.where(big, n, 1.0)), _tanh_ratio(t))
    return scale * v


def exp_map_origin_vjp(v, c, grad):
    k = check_curvature(c)
    v = _as_float(v)
    g = _as_float(grad)
    s = np.sqrt(k)
    n2 = _sqnorm(v)
    n = np.sqrt(n2)
    t2 = k * n2
    big = np.sqrt(t2) > _EXP_T_MAX
    vg = _dot(v, g)
    t2c = np.minimum(t2, _EXP_T_MAX**2)
    e = _tanh_ratio(np.sqrt(t2c))
    q = _tanh_ratio_slope(t2c)
    grad_v = e * g + (k * q * vg) * v
    grad_k = np.where(big, 0.0, vg * n2 * q / 2.0)
    # Saturated rows: out = tanh(T) v / (s n), radial derivative is zero.
    safe_n = np.where(big, n, 1.0)
    u = v / safe_n
    sat = np.tanh(_EXP_T_MAX) / (s * safe_n) * (g - u * _dot(u, g))
    grad_v = np.where(big, sat, grad_v)
    grad_k_sat = np.where(big, vg * np.tanh(_EXP_T_MAX) / (s * safe_n) * (-0.5 / k), 0.0)
    return grad_v, -(np.sum(grad_k) + np.sum(grad_k_sat))


def _arcosh_slope_k(z):
    """(z/s - arcosh(1+z)/2) with s = sqrt(z(z+2)); the k-derivative core.

    Cancels for small z, where the series in z is used instead.
    """
    z = np.asarray(z, dtype=np.float64)
    small = z < _ARCOSH_SERIES_Z
    zs = np.where(small, 0.0, z)
    s = np.sqrt(zs * (zs + 2.0))
    direct = np.where(small, 0.0, zs / np.where(small, 1.0, s)) - 0.5 * np.log1p(zs + s)
    zz = np.where(small, z, 0.0)
    series = np.sqrt(zz / 2.0) * zz * (-1 / 6 + zz * (3 / 40 - zz * (15 / 448)))
    return np.where(small, series, direct)


def _dist_core(q, ax, ay, k):
    """Distance from |x - y|^2, |x|^2, |y|^2 via the arcosh form.

    ``d = arcosh(1 + 2k q / ((1 - k ax)(1 - k ay))) / sqrt(k)`` equals the
    artanh-of-Mobius-difference form but stays accurate when both points sit
    next to the boundary, where ``1 - sqrt(k) |(-x) (+) y|`` underflows.
    """
    u = 1.0 - k * ax
    v = 1.0 - k * ay
    if np.any(u <= 0.0) or np.any(v <= 0.0):
        raise DomainError("geodesic distance requested on or outside the ball boundary")
    z = 2.0 * k * q / (u * v)
    s = np.sqrt(z * (z + 2.0))
    return np.log1p(z + s) / np.sqrt(k), z, s, u, v


def _dist_core_vjp(g, q, ax, ay, k):
    """Cotangents on (q, ax, ay) and the summed k cotangent."""
    d, z, s, u, v = _dist_core(q, ax, ay, k)
    live = z > 0.0
    g = np.where(live, g, 0.0)
    gz = g / (np.sqrt(k) * np.where(live, s, 1.0))
    gq = gz * 2.0 * k / (u * v)
    gax = gz * z * k / u
    gay = gz * z * k / v
    # d/dk: explicit through 1/sqrt(k) and through z = 2kq/(uv).
    gk = np.sum(g * (_arcosh_slope_k(z) / k + z * (ax / u + ay / v) / np.where(live, s, 1.0)) / np.sqrt(k))
    return gq, gax, gay, gk


def geodesic_distance(x, y, c):
    r"""Poincare distance :math:`(2/\sqrt{|c|})\,\mathrm{artanh}(\sqrt{|c|}\,\|(-x) \oplus_c y\|)`.

    Evaluated through the equivalent arcosh form, which is exactly symmetric
    in ``x`` and ``y`` and well conditioned near the boundary.
    """
    k = check_curvature(c)
    x = _as_float(x)
    y = _as_float(y)
    diff = x - y
    d, _, _, _, _ = _dist_core(np.sum(diff * diff, axis=-1), np.sum(x * x, axis=-1), np.sum(y * y, axis=-1), k)
    return d


def geodesic_distance_vjp(x, y, c, grad):
    """Cotangents of :func:`geodesic_distance`.

    At coincident points the distance is not differentiable; the zero
    subgradient is returned there.
    """
    k = check_curvature(c)
    x = _as_float(x)
    y = _as_float(y)
    diff = x - y
    gq, gax, gay, gk = _dist_core_vjp(
        np.asarray(grad, dtype=np.float64), np.sum(diff * diff, axis=-1),
        np.sum(x * x, axis=-1), np.sum(y * y, axis=-1), k,
    )
    grad_x = 2.0 * gq[..., None] * diff + 2.0 * gax[..., None] * x
    grad_y = -2.0 * gq[..., None] * diff + 2.0 * gay[..., None] * y
    return grad_x, grad_y, -gk


def distance_matrix(p, c):
    """All pairwise geodesic distances between the rows of ``p``."""
    k = check_curvature(c)
    p = _as_float(p)
    a = np.sum(p * p, axis=1)
    q = cdist(p, p, "sqeuclidean")
    d, _, _, _, _ = _dist_core(q, a[:, None], a[None, :], k)
    np.fill_diagonal(d, 0.0)
    return d


def distance_matrix_vjp(p, c, grad):
    """Cotangents ``(grad_p, grad_c)``; coincident pairs contribute nothing."""
    k = check_curvature(c)
    p = _as_float(p)
    a = np.sum(p * p, axis=1)
    q = cdist(p, p, "sqeuclidean")
    g = np.array(grad, dtype=np.float64)
    np.fill_diagonal(g, 0.0)
    gq, gax, gay, gk = _dist_core_vjp(g, q, a[:, None], a[None, :], k)
    # q_ij = |p_i - p_j|^2 and a_i = |p_i|^2 pulled back to the rows.
    w = gq + gq.T
    grad_p = 2.0 * (w.sum(axis=1)[:, None] * p - w @ p)
    grad_p += 2.0 * (gax.sum(axis=1) + gay.sum(axis=0))[:, None] * p
    return grad_p, -gk
