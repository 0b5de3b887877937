"""Tiled, group-fused distributed training of CNN front layers."""
from .errors import (ConfigurationError, ConsistencyError, FormatError, FrameError, ParseError,
                     PlanInvariantError, ShapeError, TileTrainError, TransportError, TransportTimeout)

__version__ = "0.1.0"

__all__ = [
    "TileTrainError", "ShapeError", "ConfigurationError", "PlanInvariantError", "ConsistencyError",
    "ParseError", "FormatError", "FrameError", "TransportError", "TransportTimeout", "__version__",
]
