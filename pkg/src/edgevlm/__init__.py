"""Desk-scale vision-language model runtime with image-token compression."""

from .config import CompressionKind, CompressionStrategy, LMConfig, ModelConfig, VisionConfig
from .tensor import Tensor, backward, no_grad, precision

__all__ = ["CompressionKind", "CompressionStrategy", "LMConfig", "ModelConfig", "VisionConfig",
           "Tensor", "backward", "no_grad", "precision"]
__version__ = "0.1.0"
