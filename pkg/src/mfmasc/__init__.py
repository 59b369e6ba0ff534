"""LCNN acoustic scene classification with Max Feature Map activations."""

from .config import AugmentConfig, FeatureConfig, LCNNConfig, RunConfig, TrainConfig
from .lcnn import LCNNModel, build, load, save
from .tensor import Tape, Tensor, backward

__all__ = [
    "AugmentConfig",
    "FeatureConfig",
    "LCNNConfig",
    "LCNNModel",
    "RunConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "load",
    "save",
]

__version__ = "0.1.0"
