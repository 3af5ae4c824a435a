"""Blind image inpainting with hierarchical contrastive corruption detection, in plain numpy."""

from .config import DetectorConfig, ModelConfig, RunConfig, TrainConfig

__all__ = ["DetectorConfig", "ModelConfig", "RunConfig", "TrainConfig"]
__version__ = "0.1.0"
