"""Segmentation model: small conv encoder, coupling decode loop, linear head.

The encoder is a fixed stack of 3x3 convolution + relu stages; the first
log2(downsample_factor) stages use stride 2 and the final stage stride 1.
Every stage output is projected to c_feat by a 1x1 convolution and folded to
the aggregation scale H/factor x W/factor (finer maps by a strided projection,
coarser ones by nearest upsampling), then summed into the base feature map.

Decoding starts from a learnable, input-independent embedding table shared by
all images and runs the coupling layer L times per sample.  The head scores
pixels against projected final embeddings, upsamples the scores to the input
resolution, and softmaxes over categories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .coupling import CouplingParams, TopKConfig, coupling_forward
from .tensor import (
    Tensor,
    concat,
    conv2d,
    gather_rows,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax_axis,
    transpose2d,
    upsample_nearest,
)


@dataclass
class ModelConfig:
    num_categories: int
    image_size: int = 64
    c_feat: int = 128
    c_class: int = 64
    decoder_layers: int = 2
    encoder_widths: Tuple[int, ...] = (32, 64)
    downsample_factor: int = 4
    topk_ratio: float = 0.02
    topk_eps: float = 1e-6

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        errors = []
        if self.num_categories < 2:
            errors.append(f"num_categories must be >= 2, got {self.num_categories}")
        if self.c_feat < 4 or self.c_class < 4:
            errors.append("c_feat and c_class must be >= 4")
        if self.decoder_layers < 0:
            errors.append(f"decoder_layers must be >= 0, got {self.decoder_layers}")
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            errors.append(f"downsample_factor must be a power of two >= 2, got {f}")
        else:
            stride2 = int(math.log2(f))
            if len(self.encoder_widths) != stride2:
                errors.append(
                    f"encoder_widths needs {stride2} entries for factor {f}, "
                    f"got {len(self.encoder_widths)}"
                )
            if self.image_size % f != 0:
                errors.append(f"image_size {self.image_size} not divisible by factor {f}")
        if not 0.0 < self.topk_ratio <= 1.0:
            errors.append(f"topk_ratio must be in (0, 1], got {self.topk_ratio}")
        if self.topk_eps <= 0:
            errors.append("topk_eps must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def stage_plan(self) -> List[Tuple[int, int]]:
        """(width, stride) per encoder stage, strided stages first."""
        plan = [(w, 2) for w in self.encoder_widths]
        plan.append((self.c_feat, 1))
        return plan

    def topk(self) -> TopKConfig:
        return TopKConfig(ratio=self.topk_ratio, eps=self.topk_eps)


@dataclass
class ModelOutput:
    logits: Tensor                       # (B, N, H, W), pre-softmax
    probs: Tensor                        # (B, N, H, W)
    scores_per_layer: List[Tensor]       # each (B, N, H', W'), raw heat scores
    heat_per_layer: List[Tensor]         # each (B, N, H', W'), sigmoid heat
    embeddings_per_layer: List[Tensor]   # each (B, N, c_class), post-update
    features: Tensor                     # (B, c_feat, H', W'), encoder output


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SegModel:
    """Parameters plus forward logic; construction is deterministic in (config, seed)."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float64):
        self.config = config
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

        self.enc_weights: List[Tuple[Tensor, Tensor]] = []
        cin = 3
        for width, _stride in config.stage_plan:
            w = Tensor(_uniform(rng, cin * 9, (width, cin, 3, 3), dtype), requires_grad=True)
            b = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
            self.enc_weights.append((w, b))
            cin = width

        self.proj_weights: List[Tuple[Tensor, Tensor]] = []
        for width, _stride in config.stage_plan:
            w = Tensor(_uniform(rng, width, (config.c_feat, width, 1, 1), dtype), requires_grad=True)
            b = Tensor(np.zeros(config.c_feat, dtype=dtype), requires_grad=True)
            self.proj_weights.append((w, b))

        # the embedding table is not a projection; a moderate fixed scale keeps
        # the query/head products responsive at small learning rates
        self.embeddings = Tensor(
            rng.uniform(-0.5, 0.5, size=(config.num_categories, config.c_class)).astype(dtype),
            requires_grad=True,
        )

        self.layers: List[CouplingParams] = [
            CouplingParams.initialize(config.c_feat, config.c_class, rng, dtype=dtype)
            for _ in range(config.decoder_layers)
        ]

        self.head_w = Tensor(
            _uniform(rng, config.c_class, (config.c_class, config.c_feat), dtype),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(config.c_feat, dtype=dtype), requires_grad=True)

    # ----- parameter plumbing -----

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out: List[Tuple[str, Tensor]] = []
        for i, (w, b) in enumerate(self.enc_weights):
            out.append((f"encoder.stage{i}.weight", w))
            out.append((f"encoder.stage{i}.bias", b))
        for i, (w, b) in enumerate(self.proj_weights):
            out.append((f"encoder.proj{i}.weight", w))
            out.append((f"encoder.proj{i}.bias", b))
        out.append(("embeddings", self.embeddings))
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layers.{i}"))
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def load_arrays(self, arrays: dict) -> None:
        """Copy named arrays into the parameters; shapes must match exactly."""
        for name, param in self.named_parameters():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing array {name!r}")
            src = arrays[name]
            if tuple(src.shape) != tuple(param.data.shape):
                raise ValueError(
                    f"checkpoint array {name!r} has shape {tuple(src.shape)}, "
                    f"model expects {tuple(param.data.shape)}"
                )
            param.data = src.astype(self.dtype, copy=True)

    # ----- forward pieces -----

    def encoder_forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images shaped (B, 3, H, W), got {images.shape}")
        height, width = images.shape[2], images.shape[3]
        f = self.config.downsample_factor
        if height % f or width % f:
            raise ValueError(f"image extents {(height, width)} not divisible by {f}")
        target = height // f

        stage_outs = []
        # center [0, 1] inputs so the first stage sees a signed signal
        h = 2.0 * images - 1.0
        for (w, b), (_width, stride) in zip(self.enc_weights, self.config.stage_plan):
            h = relu(conv2d(h, w, stride=stride, padding=1) + reshape(b, (b.shape[0], 1, 1)))
            stage_outs.append(h)

        agg = None
        for (w, b), stage in zip(self.proj_weights, stage_outs):
            scale = stage.shape[2]
            if scale >= target:
                proj = conv2d(stage, w, stride=scale // target, padding=0)
            else:
                proj = upsample_nearest(conv2d(stage, w, stride=1, padding=0), target // scale)
            proj = proj + reshape(b, (b.shape[0], 1, 1))
            agg = proj if agg is None else agg + proj
        return agg

    def decode(self, base: Tensor):
        """Run the coupling layers per sample on flattened (P, c_feat) features."""
        batch = base.shape[0]
        c_feat, hh, ww = base.shape[1], base.shape[2], base.shape[3]
        pixels = hh * ww
        topk = self.config.topk()
        n = self.config.num_categories

        per_sample_feats = []
        for bi in range(batch):
            fb = reshape(gather_rows(base, np.array([bi])), (c_feat, pixels))
            per_sample_feats.append(transpose2d(fb))

        per_sample_emb = [self.embeddings for _ in range(batch)]
        scores_layers: List[Tensor] = []
        heat_layers: List[Tensor] = []
        emb_layers: List[Tensor] = []

        for layer in self.layers:
            score_rows, heat_rows, emb_rows = [], [], []
            for bi in range(batch):
                feats_out, emb_out, scores, heat = coupling_forward(
                    per_sample_feats[bi], per_sample_emb[bi], layer, topk
                )
                per_sample_feats[bi] = feats_out
                per_sample_emb[bi] = emb_out
                score_rows.append(reshape(transpose2d(scores), (1, n, hh, ww)))
                heat_rows.append(reshape(transpose2d(heat), (1, n, hh, ww)))
                emb_rows.append(reshape(emb_out, (1, n, emb_out.shape[1])))
            scores_layers.append(concat(score_rows, axis=0))
            heat_layers.append(concat(heat_rows, axis=0))
            emb_layers.append(concat(emb_rows, axis=0))

        return per_sample_feats, per_sample_emb, scores_layers, heat_layers, emb_layers

    def output_head(self, per_sample_feats, per_sample_emb, hh: int, ww: int):
        n = self.config.num_categories
        rows = []
        for feats, emb in zip(per_sample_feats, per_sample_emb):
            queries = matmul(emb, self.head_w) + self.head_b
            z = matmul(feats, transpose2d(queries))
            rows.append(reshape(transpose2d(z), (1, n, hh, ww)))
        logits_low = concat(rows, axis=0)
        logits = upsample_nearest(logits_low, self.config.downsample_factor)
        return logits, softmax_axis(logits, axis=1)

    def forward(self, images: Tensor) -> ModelOutput:
        base = self.encoder_forward(images)
        hh, ww = base.shape[2], base.shape[3]
        feats, emb, scores_layers, heat_layers, emb_layers = self.decode(base)
        logits, probs = self.output_head(feats, emb, hh, ww)
        return ModelOutput(
            logits=logits,
            probs=probs,
            scores_per_layer=scores_layers,
            heat_per_layer=heat_layers,
            embeddings_per_layer=emb_layers,
            features=base,
        )

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax category map, ties resolved toward the lower index."""
        with no_grad():
            out = self.forward(Tensor(images.astype(self.dtype, copy=False)))
        return np.argmax(out.probs.data, axis=1)
