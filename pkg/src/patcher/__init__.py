"""Patcher: patch Transformers with a mixture-of-experts decoder, on a numpy autodiff engine."""

from .decoder import DecoderConfig
from .encoder import PatcherConfig
from .model import Patcher
from .tensor import Tensor, no_grad

__all__ = ["DecoderConfig", "Patcher", "PatcherConfig", "Tensor", "no_grad"]
__version__ = "0.1.0"
