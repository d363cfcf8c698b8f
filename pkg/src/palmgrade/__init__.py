"""From-scratch numpy CNN engine for multi-class fruit ripeness grading."""

__version__ = "0.1.0"

from .errors import (ArchiveError, ConfigError, DataError, GraphError, NumericError, PalmError,
                     ShapeError, SingleClassError)
from .layers import LayerGraph, Mode
from .models import ArchitectureConfig, attach_transfer_head, build
from .train import TrainConfig, evaluate, fit

__all__ = [
    "ArchitectureConfig", "ArchiveError", "ConfigError", "DataError", "GraphError",
    "LayerGraph", "Mode", "NumericError", "PalmError", "ShapeError", "SingleClassError",
    "TrainConfig", "attach_transfer_head", "build", "evaluate", "fit",
]
