"""Semantic segmentation with heatmap-coupled class embeddings.

The package is self-contained: a small reverse-mode tensor core, the coupling
layer that exchanges information between per-category embeddings and pixel
features through class heatmaps, the surrounding model, losses, metrics, a
deterministic synthetic dataset, and a CLI.  Every adjoint is covered by
finite-difference checks (``heatseg gradcheck``).
"""
from .coupling import CouplingParams, TopKConfig, coupling_forward
from .losses import LossWeights, cross_entropy, dice_loss, fisher_loss, heatmap_loss, total_loss
from .metrics import ConfusionMatrix, summarize
from .model import ModelConfig, ModelOutput, SegModel
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "CouplingParams",
    "LossWeights",
    "ModelConfig",
    "ModelOutput",
    "SegModel",
    "Tensor",
    "TopKConfig",
    "backward",
    "coupling_forward",
    "cross_entropy",
    "dice_loss",
    "fisher_loss",
    "heatmap_loss",
    "no_grad",
    "summarize",
    "total_loss",
    "__version__",
]
