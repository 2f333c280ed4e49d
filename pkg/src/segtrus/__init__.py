"""Residual fully convolutional network for binary segmentation, in NumPy."""

from .estimator import ResidualSegmenter
from .model import NetworkConfig, build_network, forward, backward, init_params, param_count
from .train import Checkpoint, TrainConfig, evaluate, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "NetworkConfig", "ResidualSegmenter", "TrainConfig", "backward", "build_network",
    "evaluate", "forward", "init_params", "load_checkpoint", "param_count", "run_training",
    "save_checkpoint",
]
