"""Dual-branch finger-vein segmentation and label-diffusion identification."""

from .config import TrainConfig, load_config
from .model import VeinDiffModel
from .trainer import Checkpoint, evaluate, joint_train, pretrain_segmentation

__all__ = [
    "Checkpoint",
    "TrainConfig",
    "VeinDiffModel",
    "evaluate",
    "joint_train",
    "load_config",
    "pretrain_segmentation",
]
