"""Minimal reverse-mode autodiff, a tiny velocity U-Net, Adam and the training loop."""

from .autodiff import NonFiniteError, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .net import NetConfig, VelocityNet
from .optim import Adam

__all__ = ["Adam", "NetConfig", "NonFiniteError", "Tape", "VelocityNet", "load_checkpoint", "save_checkpoint"]
