"""Generalized referring-expression segmentation decoder at toy scale."""
from .config import Config, DataConfig, LossConfig, ModelConfig, OptimConfig
from .metrics import MetricReport
from .model import GresModel, build_model
from .synthgres import GenConfig, GresDataset, generate

__version__ = "0.1.0"

__all__ = ["Config", "DataConfig", "LossConfig", "ModelConfig", "OptimConfig", "MetricReport",
           "GresModel", "build_model", "GenConfig", "GresDataset", "generate"]
