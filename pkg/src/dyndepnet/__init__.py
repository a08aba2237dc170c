"""End-to-end learning of time-varying graph structure for multivariate series classification."""

from .config import RunConfig, load_config
from .model import DynDepNet, ModelConfig
from .synthdata import Dataset, generate, read_dataset, write_dataset
from .trainer import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DynDepNet",
    "ModelConfig",
    "RunConfig",
    "Dataset",
    "generate",
    "read_dataset",
    "write_dataset",
    "load_config",
    "train",
    "load_checkpoint",
    "save_checkpoint",
]
