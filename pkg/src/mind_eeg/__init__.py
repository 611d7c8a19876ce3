"""Multi-granularity EEG graph network with vector-quantized adjacency codebooks."""

from .config import ModelConfig
from .model import MindEegModel, forward, integrative_loss, sgd_step

__all__ = ["ModelConfig", "MindEegModel", "forward", "integrative_loss", "sgd_step"]
__version__ = "0.1.0"
