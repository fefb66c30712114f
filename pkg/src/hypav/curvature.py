"""Adaptive curvature head.

A single fully connected layer reads the concatenated modality features and
emits ``N_c`` curvatures ``c_i = c0 * sigmoid(s_i)``, where ``s_i`` is the
batch mean of the layer's pre-activation for output unit ``i``. One batch
therefore shares one set of curvatures, all strictly inside ``(c0, 0)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DomainError


@dataclass
class CurvatureMlp:
    weights: np.ndarray  # (in_dim, N_c)
    bias: np.ndarray  # (N_c,)
    c0: float = -0.4

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.bias.shape[0]:
            raise ConfigError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if self.bias.shape[0] < 1:
            raise ConfigError("curvature head needs at least one output")
        if not self.c0 < 0:
            raise ConfigError(f"c0 must be negative, got {self.c0}")

    @property
    def num_curvatures(self):
        return self.bias.shape[0]

    @classmethod
    def init(cls, in_dim, num_curvatures=1, c0=-0.4, seed=0):
        """Fan-in uniform weights, zero bias (so the first curvature is c0/2)."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(in_dim, num_curvatures))
        return cls(w, np.zeros(num_curvatures), c0)

    @classmethod
    def zeros(cls, in_dim, num_curvatures=1, c0=-0.4):
        return cls(np.zeros((in_dim, num_curvatures)), np.zeros(num_curvatures), c0)


def concat_features(phi_v, phi_a):
    phi_v = np.asarray(phi_v, dtype=np.float64)
    phi_a = np.asarray(phi_a, dtype=np.float64)
    if phi_v.ndim != 2 or phi_a.ndim != 2:
        raise DomainError("concat_features expects 2-D batches")
    if phi_v.shape[0] == 0:
        raise DomainError("cannot concatenate empty batches")
    if phi_v.shape[0] != phi_a.shape[0]:
        raise DomainError(f"row mismatch: {phi_v.shape[0]} vs {phi_a.shape[0]}")
    return np.concatenate([phi_v, phi_a], axis=1)


def split_features(phi_va, dim_v):
    phi_va = np.asarray(phi_va)
    return phi_va[:, :dim_v], phi_va[:, dim_v:]


def _pre_activation(phi_va, mlp):
    phi_va = np.asarray(phi_va, dtype=np.float64)
    if phi_va.ndim != 2 or phi_va.shape[1] != mlp.weights.shape[0]:
        raise DomainError(
            f"curvature head expects width {mlp.weights.shape[0]}, got {phi_va.shape}"
        )
    return phi_va.mean(axis=0) @ mlp.weights + mlp.bias


def adapt_curvatures(phi_va, mlp):
    """Curvatures for one batch, shape ``(N_c,)``."""
    return mlp.c0 * expit(_pre_activation(phi_va, mlp))


def adapter_vjp(phi_va, mlp, cotangent):
    """Returns ``(grad_weights, grad_bias, grad_phi_va)``."""
    phi_va = np.asarray(phi_va, dtype=np.float64)
    g = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    sig = expit(_pre_activation(phi_va, mlp))
    gs = g * mlp.c0 * sig * (1.0 - sig)
    mean = phi_va.mean(axis=0)
    grad_w = np.outer(mean, gs)
    grad_b = gs
    grad_phi = np.broadcast_to(mlp.weights @ gs / phi_va.shape[0], phi_va.shape).copy()
    return grad_w, grad_b, grad_phi
