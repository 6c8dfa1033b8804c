"""Desk-scale colorization benchmark: differentiable color spaces, a
five-stage encoder-decoder network, interchangeable training strategies
and a full loss/metric suite."""

from . import colorspace, gradcheck, losses, metrics, pipeline, ppm, tensor, unet
from .errors import (ChromaBenchError, CheckpointError, ConfigError, ContractError,
                     DataError, DimensionError, NumericalError)

__version__ = "0.1.0"

__all__ = [
    "colorspace", "gradcheck", "losses", "metrics", "pipeline", "ppm", "tensor",
    "unet", "ChromaBenchError", "CheckpointError", "ConfigError", "ContractError",
    "DataError", "DimensionError", "NumericalError", "__version__",
]
