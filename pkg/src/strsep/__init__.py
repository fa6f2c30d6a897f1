"""Blind source separation with source-wise structured Transformer regularisation."""

from .datagen import SyntheticSpec, generate_dataset
from .evaluation import joint_diag_baseline, match_sources
from .objective import ObjectiveWeights
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["SyntheticSpec", "generate_dataset", "joint_diag_baseline", "match_sources",
           "ObjectiveWeights", "TrainConfig", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
