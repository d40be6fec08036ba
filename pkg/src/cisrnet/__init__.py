"""Coarse-to-fine super-resolution for heavily JPEG-compressed images, on a small numpy autograd."""

from .errors import CisrError, ConfigError, DataError, NumericError, ShapeError
from .model import CisrModel, ModelConfig, count_params

__all__ = [
    "CisrError",
    "CisrModel",
    "ConfigError",
    "DataError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "count_params",
]
__version__ = "0.1.0"
