"""Desk-scale vision-language pre-training with masked semantic completion."""

from .config import Config, ConfigError, parse_config
from .encoders import ModelConfig, VLModel
from .objectives import LossReport
from .trainer import Trainer

__all__ = ["Config", "ConfigError", "LossReport", "ModelConfig", "Trainer", "VLModel", "parse_config"]
__version__ = "0.1.0"
