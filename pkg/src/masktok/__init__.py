"""Hierarchical coarse-to-fine tokenizer for binary segmentation masks."""

from .model import ModelConfig, MaskTokenizerModel, MICRO_CONFIG
from .losses import LossWeights
from .trainer import TrainConfig, fit, train_step
from .checkpoint import save_checkpoint, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "MaskTokenizerModel",
    "MICRO_CONFIG",
    "LossWeights",
    "TrainConfig",
    "fit",
    "train_step",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
