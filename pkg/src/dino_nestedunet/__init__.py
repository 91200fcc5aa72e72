"""Frozen-ViT adapter + nested dense decoder for tumour-bulk segmentation."""

from .config import ModelConfig, TrainConfig, desk_scale, full_scale, load_config, save_config, validate_config
from .model import DinoNestedUNet, build_model

__all__ = [
    "DinoNestedUNet",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "desk_scale",
    "load_config",
    "full_scale",
    "save_config",
    "validate_config",
]

__version__ = "0.1.0"
