"""Object-aware reweighting of patch-mixing layers (attention, token MLP, convolution)."""

from .errors import OAMixerError
from .models import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, evaluate_all, train

__version__ = "0.1.0"

__all__ = [
    "OAMixerError",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "evaluate",
    "evaluate_all",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
