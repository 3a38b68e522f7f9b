"""SE-Inception-DenseNet on a small numpy autodiff engine."""
from .errors import ConfigError, ContractError, SeidError, ShapeError
from .model import ArchitectureConfig, build_model, classify_forward, describe, extract_features
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "ConfigError",
    "ContractError",
    "SeidError",
    "ShapeError",
    "Tape",
    "Tensor",
    "build_model",
    "classify_forward",
    "describe",
    "extract_features",
    "grad_check",
]
