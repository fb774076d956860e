"""Double-condensing attention condenser networks for skin-lesion classification."""

__version__ = "0.1.0"

from .backbone import Network, NetworkConfig, analyze, build_network, load_config, full_config, tiny_config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DcacError,
    ImageFormatError,
    NumericalError,
    ShapeError,
)
from .evaluation import EvalReport, ScoredSet, auroc, evaluate, public_private_split
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, adamw_step, cosine_lr, train_two_phase

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DcacError",
    "EvalReport",
    "ImageFormatError",
    "Network",
    "NetworkConfig",
    "NumericalError",
    "ScoredSet",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "adamw_step",
    "analyze",
    "auroc",
    "backward",
    "build_network",
    "cosine_lr",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "no_grad",
    "full_config",
    "public_private_split",
    "save_checkpoint",
    "tiny_config",
    "train_two_phase",
]
