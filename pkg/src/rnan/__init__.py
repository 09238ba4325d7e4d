"""Residual neuron-attention network for single-image super-resolution, on a numpy autodiff core."""

from .model import ModelConfig, RNANWeights, count_params, init_params, load_weights, rnan_forward, save_weights
from .train import TrainConfig

__all__ = [
    "ModelConfig",
    "RNANWeights",
    "TrainConfig",
    "count_params",
    "init_params",
    "load_weights",
    "rnan_forward",
    "save_weights",
]

__version__ = "0.1.0"
