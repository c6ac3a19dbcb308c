"""A from-scratch transformer encoder-decoder for image captioning, with caption metrics."""

from . import data, decoding, metrics, tensor, text, training, transformer
from .tensor import Tensor, backward, grad_check
from .transformer import ModelConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = ["data", "decoding", "metrics", "tensor", "text", "training", "transformer",
           "Tensor", "backward", "grad_check", "ModelConfig", "TrainConfig"]
