"""Training objective: cross entropy + dice on the final prediction, deep
heatmap supervision on every layer's raw scores, and a within/between scatter
ratio that pushes per-category embeddings apart across the batch.

The total is main + lambda_heatmap * heat term + lambda_fisher * scatter term.
Zero-weight terms still enter the graph; multiplying by an exact 0.0 adds
nothing to either the value or the gradients, so a zero-lambda run follows the
main-only trajectory bitwise while the terms remain available for logging.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    Tensor,
    exp,
    log,
    mul,
    reduce,
    reshape,
    softmax_axis,
    upsample_nearest,
)


@dataclass
class LossWeights:
    lambda_heatmap: float = 0.1
    lambda_fisher: float = 0.1
    fisher_eps: float = 1e-6
    ignore_index: Optional[int] = None

    def __post_init__(self):
        if self.lambda_heatmap < 0 or self.lambda_fisher < 0:
            raise ValueError("loss weights must be non-negative")
        if self.fisher_eps <= 0:
            raise ValueError("fisher_eps must be positive")


def _check_labels(labels: np.ndarray, num_categories: int, ignore_index) -> np.ndarray:
    """Validate the label map and return the scored-pixel mask."""
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    valid = (labels >= 0) & (labels < num_categories)
    if ignore_index is not None:
        ignored = labels == ignore_index
        if not np.all(valid | ignored):
            bad = labels[~(valid | ignored)]
            raise ValueError(f"label value {bad.flat[0]} outside [0, {num_categories})")
        mask = ~ignored
    else:
        if not np.all(valid):
            bad = labels[~valid]
            raise ValueError(f"label value {bad.flat[0]} outside [0, {num_categories})")
        mask = np.ones_like(labels, dtype=bool)
    if not mask.any():
        raise ValueError("no scored pixels: every label is the ignore index")
    return mask


def _one_hot(labels: np.ndarray, num_categories: int, mask: np.ndarray, dtype) -> np.ndarray:
    """(B, N, H, W) indicator array, zero on ignored pixels."""
    clipped = np.where(mask, labels, 0)
    oh = clipped[:, None, :, :] == np.arange(num_categories)[None, :, None, None]
    return (oh & mask[:, None, :, :]).astype(dtype)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over scored pixels, from raw logits.

    The per-pixel max is subtracted as a constant before exponentiation; that
    leaves the gradients exact while keeping the exponentials bounded.
    """
    if logits.ndim != 4:
        raise ValueError(f"expected logits shaped (B, N, H, W), got {logits.shape}")
    n = logits.shape[1]
    if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    mask = _check_labels(labels, n, ignore_index)
    dtype = logits.dtype
    onehot = Tensor(_one_hot(labels, n, mask, dtype))

    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = log(reduce(exp(z), axis=1, kind="sum", keepdims=True))
    picked = reduce(mul(z - lse, onehot), axis=1, kind="sum")
    count = float(mask.sum())
    return -(reduce(picked, kind="sum") / count)


def dice_loss(
    probs: Tensor,
    labels: np.ndarray,
    ignore_index: Optional[int] = None,
    smooth: float = 1.0,
) -> Tensor:
    """One minus the soft dice coefficient averaged over every category.

    Overlap and mass sums run over the whole batch; ignored pixels are
    excluded from all sums.  Categories absent from both prediction mass and
    labels still contribute via the smoothing term.
    """
    if probs.ndim != 4:
        raise ValueError(f"expected probabilities shaped (B, N, H, W), got {probs.shape}")
    n = probs.shape[1]
    mask = _check_labels(labels, n, ignore_index)
    dtype = probs.dtype
    onehot = Tensor(_one_hot(labels, n, mask, dtype))
    mask_t = Tensor(mask[:, None, :, :].astype(dtype))

    p = mul(probs, mask_t)
    inter = reduce(mul(p, onehot), axis=(0, 2, 3), kind="sum")
    p_sum = reduce(p, axis=(0, 2, 3), kind="sum")
    g_sum = reduce(onehot, axis=(0, 2, 3), kind="sum")
    dice = ((2.0 * inter) + smooth) / (p_sum + g_sum + smooth)
    return 1.0 - reduce(dice, kind="mean")


def heatmap_loss(
    scores_per_layer: Sequence[Tensor],
    labels: np.ndarray,
    ignore_index: Optional[int] = None,
) -> Tensor:
    """Deep supervision: CE plus dice of each layer's upsampled raw scores."""
    if not scores_per_layer:
        return Tensor(0.0)
    total = None
    for scores in scores_per_layer:
        if labels.shape[1] % scores.shape[2] or labels.shape[2] % scores.shape[3]:
            raise ValueError(
                f"label extents {labels.shape[1:]} not a multiple of "
                f"score extents {tuple(scores.shape[2:])}"
            )
        factor = labels.shape[1] // scores.shape[2]
        up = upsample_nearest(scores, factor)
        term = cross_entropy(up, labels, ignore_index)
        term = term + dice_loss(softmax_axis(up, axis=1), labels, ignore_index)
        total = term if total is None else total + term
    return total


def fisher_loss(embeddings_per_layer: Sequence[Tensor], eps: float = 1e-6) -> Tensor:
    """Sum over layers of within-category scatter over between-category scatter.

    Embeddings come in as (B, N, C).  Within: mean squared distance of each
    sample's category embedding to the category mean, averaged over B * N.
    Between: mean squared distance of category means to their overall mean,
    averaged over N.  A batch of identical embeddings gives an exact zero when
    the mean reduction is exact (batches of 2 and 4); larger batches sit at
    the square of the unit roundoff because the accumulation order rounds.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not embeddings_per_layer:
        return Tensor(0.0)
    total = None
    for emb in embeddings_per_layer:
        if emb.ndim != 3:
            raise ValueError(f"expected embeddings shaped (B, N, C), got {emb.shape}")
        batch, n = emb.shape[0], emb.shape[1]
        cat_means = reduce(emb, axis=0, kind="mean")          # (N, C)
        overall = reduce(cat_means, axis=0, kind="mean")      # (C,)
        within_dev = emb - cat_means
        s_w = reduce(mul(within_dev, within_dev), kind="sum") / float(batch * n)
        between_dev = cat_means - overall
        s_b = reduce(mul(between_dev, between_dev), kind="sum") / float(n)
        term = s_w / (s_b + eps)
        total = term if total is None else total + term
    return total


def total_loss(
    logits: Tensor,
    probs: Tensor,
    labels: np.ndarray,
    scores_per_layer: Sequence[Tensor],
    embeddings_per_layer: Sequence[Tensor],
    weights: LossWeights,
) -> Tuple[Tensor, Dict[str, float]]:
    """Combined objective and a float breakdown for logging."""
    main = cross_entropy(logits, labels, weights.ignore_index)
    main = main + dice_loss(probs, labels, weights.ignore_index)
    heat = heatmap_loss(scores_per_layer, labels, weights.ignore_index)
    fisher = fisher_loss(embeddings_per_layer, weights.fisher_eps)
    total = main + weights.lambda_heatmap * heat + weights.lambda_fisher * fisher
    parts = {
        "l_total": total.item(),
        "l_main": main.item(),
        "l_hm": heat.item(),
        "l_fd": fisher.item(),
    }
    return total, parts
