"""Cascaded CNN for JPEG compression artifact suppression, on a numpy autograd engine."""

from .autograd import Tensor, no_grad
from .codec import degrade
from .model import CasCnnModel, build, init_weights, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CasCnnModel",
    "Tensor",
    "build",
    "degrade",
    "init_weights",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
