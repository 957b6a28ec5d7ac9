"""Spatial-temporal retention network for multi-sensor traffic-flow forecasting."""

from .data import FlowSeries, Normalizer, WindowedDataset, load_flow, make_windows, prepare, synthetic_series
from .evaluate import ha_forecast, horizon_report, mae, mape, rmse
from .graph import RoadGraph, adaptive_adjacency, build_adjacency, read_distances
from .model import ModelConfig, STRetNet
from .numerics import ConfigError, DimensionError, NumericError, Tensor
from .train import TrainConfig, load_checkpoint, predict, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FlowSeries", "ModelConfig", "Normalizer", "NumericError",
    "RoadGraph", "STRetNet", "Tensor", "TrainConfig", "WindowedDataset", "adaptive_adjacency",
    "build_adjacency", "ha_forecast", "horizon_report", "load_checkpoint", "load_flow", "mae",
    "make_windows", "mape", "predict", "prepare", "read_distances", "rmse", "save_checkpoint",
    "synthetic_series", "train_loop",
]
