"""Curvature-aware cross-modal alignment for audio-visual zero-shot learning."""

from . import alignment, curvature, data, hyperbolicity, model, poincare
from .errors import ConfigError, DataError, DomainError, FormatError, HypavError, NumericalDomainError

__version__ = "0.1.0"

__all__ = [
    "alignment",
    "curvature",
    "data",
    "hyperbolicity",
    "model",
    "poincare",
    "ConfigError",
    "DataError",
    "DomainError",
    "FormatError",
    "HypavError",
    "NumericalDomainError",
]
