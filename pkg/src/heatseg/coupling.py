"""Bidirectional coupling between per-category embeddings and pixel features.

One layer runs on a single image whose feature map is flattened to (P, c_feat)
with P = H' * W'.  It first scores every pixel against every category embedding
and squashes the scores into per-category heatmaps.  Each heatmap picks its
top-K pixels, whose normalized heat weights pool a projected context vector;
a scalar gate blends that context into the embedding.  The updated embeddings
then emit per-category scale/shift pairs which modulate the features, and the
modulated variants are mixed back under softmax heat weights with a residual
blend toward the incoming features.

The heatmap is computed once per layer from the incoming features and
embeddings, and both directions reuse it; the feature update reads the
already-updated embeddings.  Top-K membership is fixed during backward while
gradients still flow through the selected heat values and features.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    concat,
    gather_rows,
    matmul,
    mul,
    reduce,
    reshape,
    sigmoid,
    softmax_axis,
    tanh,
    topk_indices,
    transpose2d,
)


@dataclass
class TopKConfig:
    """Region selection: keep the ``ratio`` share of pixels, at least one."""

    ratio: float = 0.02
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"top-k ratio must be in (0, 1], got {self.ratio}")
        if self.eps <= 0.0:
            raise ValueError("normalization eps must be positive")

    def k_for(self, pixels: int) -> int:
        # round half away from zero, then clamp to at least one pixel
        return max(1, min(pixels, int(self.ratio * pixels + 0.5)))


@dataclass
class CouplingParams:
    """Learnable state of one coupling layer.

    Weight matrices are stored (in, out) so projections read x @ w + b.
    ``blend`` is the raw residual scalar; its sigmoid is the effective
    share of the incoming features kept by the fusion step.
    """

    w_query: Tensor    # (c_class, c_feat), embeddings -> pixel-score queries
    b_query: Tensor    # (c_feat,)
    w_context: Tensor  # (c_feat, c_class), pooled features -> embedding space
    b_context: Tensor  # (c_class,)
    w_gate: Tensor     # (2 * c_class, 1)
    b_gate: Tensor     # (1,)
    w_scale: Tensor    # (c_class, c_feat)
    b_scale: Tensor    # (c_feat,)
    w_shift: Tensor    # (c_class, c_feat)
    b_shift: Tensor    # (c_feat,)
    blend: Tensor      # ()

    @classmethod
    def initialize(
        cls,
        c_feat: int,
        c_class: int,
        rng: np.random.Generator,
        blend_start: float = 0.9,
        dtype=np.float64,
    ) -> "CouplingParams":
        def lin(n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            b = np.zeros(n_out, dtype=dtype)
            return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)

        w_query, b_query = lin(c_class, c_feat)
        w_context, b_context = lin(c_feat, c_class)
        w_gate, b_gate = lin(2 * c_class, 1)
        w_scale, b_scale = lin(c_class, c_feat)
        w_shift, b_shift = lin(c_class, c_feat)
        if not 0.0 < blend_start < 1.0:
            raise ValueError("blend_start must be strictly inside (0, 1)")
        raw = np.log(blend_start / (1.0 - blend_start))
        blend = Tensor(np.asarray(raw, dtype=dtype), requires_grad=True)
        return cls(
            w_query, b_query, w_context, b_context, w_gate, b_gate,
            w_scale, b_scale, w_shift, b_shift, blend,
        )

    def named(self, prefix: str) -> list:
        return [(f"{prefix}.{f.name}", getattr(self, f.name)) for f in fields(self)]


def class_heatmaps(feats: Tensor, emb: Tensor, w_query: Tensor, b_query: Tensor):
    """Score pixels against embeddings: returns raw scores and their sigmoid.

    feats is (P, c_feat), emb is (N, c_class); both outputs are (P, N).
    """
    queries = matmul(emb, w_query) + b_query
    scores = matmul(feats, transpose2d(queries))
    return scores, sigmoid(scores)


def select_region(heat_channel, cfg: TopKConfig) -> np.ndarray:
    """Top-K pixel indices of one heatmap channel; membership is not differentiated."""
    values = heat_channel.data if isinstance(heat_channel, Tensor) else np.asarray(heat_channel)
    return topk_indices(values, cfg.k_for(values.shape[0]))


def normalize_region(heat_channel: Tensor, region: np.ndarray, eps: float) -> Tensor:
    """In-region heat weights scaled by the region total (plus eps).

    Off-region weights are identically zero and are never materialized; the
    returned vector aligns with ``region``.
    """
    selected = gather_rows(heat_channel, region)
    denom = reduce(selected, kind="sum") + eps
    return selected / denom


def pool_context(
    feats: Tensor,
    weights: Tensor,
    region: np.ndarray,
    w_context: Tensor,
    b_context: Tensor,
) -> Tensor:
    """Heat-weighted sum of projected region features, shape (c_class,)."""
    selected = gather_rows(feats, region)
    projected = matmul(selected, w_context) + b_context
    weighted = mul(projected, reshape(weights, (len(region), 1)))
    return reduce(weighted, axis=0, kind="sum")


def gated_update(emb_prev: Tensor, contexts: Tensor, w_gate: Tensor, b_gate: Tensor):
    """Convex per-category blend of old embedding and pooled context."""
    stacked = concat([emb_prev, contexts], axis=1)
    gate = sigmoid(matmul(stacked, w_gate) + b_gate)
    updated = (1.0 - gate) * emb_prev + gate * contexts
    return updated, gate


# float64 tanh saturates to exactly +-1 past |x| ~ 19, which would let the
# scale touch 0 or 2; shrinking by one part in 1e9 keeps the interval open
_SCALE_GUARD = 1e-9


def affine_params(
    emb: Tensor,
    w_scale: Tensor,
    b_scale: Tensor,
    w_shift: Tensor,
    b_shift: Tensor,
):
    """Per-category modulation: scale strictly in (0, 2), unconstrained shift."""
    gamma = 1.0 + (1.0 - _SCALE_GUARD) * tanh(matmul(emb, w_scale) + b_scale)
    beta = matmul(emb, w_shift) + b_shift
    return gamma, beta


def modulate_and_fuse(
    feats: Tensor,
    gamma: Tensor,
    beta: Tensor,
    scores: Tensor,
    blend: Tensor,
) -> Tensor:
    """Mix per-category modulated features under softmax heat weights.

    The category sum of soft[p, n] * (gamma_n * feats[p] + beta_n) factors into
    feats * (soft @ gamma) + soft @ beta, which avoids a (P, N, c_feat)
    intermediate.  The effective residual share is sigmoid(blend).
    """
    soft = softmax_axis(scores, axis=1)
    mixed = mul(feats, matmul(soft, gamma)) + matmul(soft, beta)
    alpha = sigmoid(blend)
    return mul(alpha, feats) + mul(1.0 - alpha, mixed)


def coupling_forward(feats: Tensor, emb: Tensor, params: CouplingParams, cfg: TopKConfig):
    """One full layer pass; returns (feats_out, emb_out, scores, heat)."""
    num_categories = emb.shape[0]
    scores, heat = class_heatmaps(feats, emb, params.w_query, params.b_query)
    heat_t = transpose2d(heat)

    contexts = []
    pixels = feats.shape[0]
    for n in range(num_categories):
        channel = reshape(gather_rows(heat_t, np.array([n])), (pixels,))
        region = select_region(channel, cfg)
        weights = normalize_region(channel, region, cfg.eps)
        ctx = pool_context(feats, weights, region, params.w_context, params.b_context)
        contexts.append(reshape(ctx, (1, ctx.shape[0])))
    contexts = concat(contexts, axis=0)

    emb_out, _ = gated_update(emb, contexts, params.w_gate, params.b_gate)
    gamma, beta = affine_params(
        emb_out, params.w_scale, params.b_scale, params.w_shift, params.b_shift
    )
    feats_out = modulate_and_fuse(feats, gamma, beta, scores, params.blend)
    return feats_out, emb_out, scores, heat
