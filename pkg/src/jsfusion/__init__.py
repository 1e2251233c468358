"""Hierarchical video-sentence similarity with a self-contained autodiff engine."""

from .errors import (
    ConfigError,
    FormatError,
    InputError,
    JsfusionError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .tensor import Rng, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "InputError",
    "JsfusionError",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingDiverged",
    "UsageError",
    "__version__",
]
