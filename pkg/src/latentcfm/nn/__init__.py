from . import autograd
from .autograd import GradientError, ShapeError, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import MLP, Linear, MlpConfig, Module
from .optim import Adam

__all__ = [
    "autograd", "Tensor", "backward", "GradientError", "ShapeError",
    "Module", "Linear", "MLP", "MlpConfig", "Adam",
    "save_checkpoint", "load_checkpoint",
]
