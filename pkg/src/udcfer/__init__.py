"""Two-stage prior-diffusion pipeline for expression recognition on
degraded under-display-camera images, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     UdcferError)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
    "UdcferError",
    "__version__",
]
