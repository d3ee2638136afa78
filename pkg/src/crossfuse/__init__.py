"""Cross-attention fusion of hyperspectral and LiDAR patches, on a small numpy autodiff core."""

from .model import FusionModel, ModelConfig, load_checkpoint, param_count, save_checkpoint
from .tensor import Tape, Tensor
from .training import Metrics, TrainConfig, evaluate, train

__all__ = [
    "FusionModel",
    "Metrics",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
