"""Unsupervised multi-frame optical flow with pyramid convolutional LSTMs.

The package carries its own reverse-mode autodiff over numpy arrays, the
network (backbone, motion concentration, coarse-to-fine decoder), the
photometric losses, data codecs and a training/evaluation harness.
"""

from .config import Config, LossConfig, ModelConfig, TrainConfig
from .model import PCLNet

__all__ = ["Config", "LossConfig", "ModelConfig", "PCLNet", "TrainConfig"]
__version__ = "0.1.0"
