"""Recurrent decoding cell networks for multi-modality segmentation, on a small numpy autodiff core."""

from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .model import CRDN, CrdnConfig, load_checkpoint, param_count, save_checkpoint
from .tensor import GradTape, Tensor
# the training loop itself stays at crdn.train.train so the submodule name is not shadowed
from .train import TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = [
    "CRDN",
    "ConfigError",
    "CrdnConfig",
    "FormatError",
    "GradTape",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "evaluate",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
]
