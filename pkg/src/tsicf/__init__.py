"""Decoder-only time-series forecasting with in-context example series."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import Forecast, ModelConfig, ModelParams, forecast, init_params
from .train import TrainConfig, train

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Forecast",
    "TrainConfig",
    "init_params",
    "forecast",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

__version__ = "0.1.0"
