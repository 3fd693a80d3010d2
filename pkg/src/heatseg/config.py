"""Flat JSON run configuration with strict key checking.

Unknown keys are rejected so a misspelled weight name fails loudly instead of
silently training with the default.  All validation problems are collected
and reported together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_DEFAULTS = {
    "seed": 0,
    "train_data": None,
    "num_categories": 4,
    "image_size": 64,
    "c_feat": 128,
    "c_class": 64,
    "decoder_layers": 2,
    "encoder_widths": [32, 64],
    "downsample_factor": 4,
    "topk_ratio": 0.02,
    "topk_eps": 1e-6,
    "lambda_heatmap": 0.1,
    "lambda_fisher": 0.1,
    "fisher_eps": 1e-6,
    "ignore_index": None,
    "learning_rate": 0.8e-4,
    "total_steps": 300,
    "batch_size": 8,
    "precision": "double",
}

_INT_KEYS = (
    "seed", "num_categories", "image_size", "c_feat", "c_class",
    "decoder_layers", "downsample_factor", "total_steps", "batch_size",
)
_FLOAT_KEYS = (
    "topk_ratio", "topk_eps", "lambda_heatmap", "lambda_fisher",
    "fisher_eps", "learning_rate",
)


@dataclass
class RunConfig:
    seed: int = 0
    train_data: Optional[str] = None
    num_categories: int = 4
    image_size: int = 64
    c_feat: int = 128
    c_class: int = 64
    decoder_layers: int = 2
    encoder_widths: Tuple[int, ...] = (32, 64)
    downsample_factor: int = 4
    topk_ratio: float = 0.02
    topk_eps: float = 1e-6
    lambda_heatmap: float = 0.1
    lambda_fisher: float = 0.1
    fisher_eps: float = 1e-6
    ignore_index: Optional[int] = None
    learning_rate: float = 0.8e-4
    total_steps: int = 300
    batch_size: int = 8
    precision: str = "double"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_categories=self.num_categories,
            image_size=self.image_size,
            c_feat=self.c_feat,
            c_class=self.c_class,
            decoder_layers=self.decoder_layers,
            encoder_widths=tuple(self.encoder_widths),
            downsample_factor=self.downsample_factor,
            topk_ratio=self.topk_ratio,
            topk_eps=self.topk_eps,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_heatmap=self.lambda_heatmap,
            lambda_fisher=self.lambda_fisher,
            fisher_eps=self.fisher_eps,
            ignore_index=self.ignore_index,
        )

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_data": self.train_data,
            "num_categories": self.num_categories,
            "image_size": self.image_size,
            "c_feat": self.c_feat,
            "c_class": self.c_class,
            "decoder_layers": self.decoder_layers,
            "encoder_widths": list(self.encoder_widths),
            "downsample_factor": self.downsample_factor,
            "topk_ratio": self.topk_ratio,
            "topk_eps": self.topk_eps,
            "lambda_heatmap": self.lambda_heatmap,
            "lambda_fisher": self.lambda_fisher,
            "fisher_eps": self.fisher_eps,
            "ignore_index": self.ignore_index,
            "learning_rate": self.learning_rate,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "precision": self.precision,
        }


def parse_run_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    errors: List[str] = []
    unknown = sorted(set(raw) - set(_DEFAULTS))
    if unknown:
        errors.append("unknown config keys: " + ", ".join(repr(k) for k in unknown))
    merged = dict(_DEFAULTS)
    merged.update({k: v for k, v in raw.items() if k in _DEFAULTS})

    for key in _INT_KEYS:
        v = merged[key]
        if not isinstance(v, int) or isinstance(v, bool):
            errors.append(f"{key!r} must be an integer, got {v!r}")
    for key in _FLOAT_KEYS:
        v = merged[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append(f"{key!r} must be a number, got {v!r}")
        else:
            merged[key] = float(v)
    if merged["ignore_index"] is not None and (
        not isinstance(merged["ignore_index"], int) or isinstance(merged["ignore_index"], bool)
    ):
        errors.append(f"'ignore_index' must be an integer or null, got {merged['ignore_index']!r}")
    if merged["precision"] not in ("double", "single"):
        errors.append(f"'precision' must be 'double' or 'single', got {merged['precision']!r}")
    widths = merged["encoder_widths"]
    if not isinstance(widths, (list, tuple)) or not all(
        isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in widths
    ):
        errors.append(f"'encoder_widths' must be a list of positive integers, got {widths!r}")
    else:
        merged["encoder_widths"] = tuple(widths)
    if merged["train_data"] is not None and not isinstance(merged["train_data"], str):
        errors.append(f"'train_data' must be a string path, got {merged['train_data']!r}")
    if not errors:
        for key in ("total_steps", "batch_size"):
            if merged[key] < 1:
                errors.append(f"{key!r} must be >= 1, got {merged[key]}")
        if merged["learning_rate"] <= 0:
            errors.append(f"'learning_rate' must be positive, got {merged['learning_rate']}")
    if errors:
        raise ConfigError(errors)

    if merged["train_data"] is not None and base_dir is not None:
        p = Path(merged["train_data"])
        if not p.is_absolute():
            merged["train_data"] = str(base_dir / p)

    cfg = RunConfig(**merged)
    try:
        cfg.model_config()
        cfg.loss_weights()
    except ValueError as e:
        raise ConfigError([str(e)]) from None
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON: {e}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return parse_run_config(raw, base_dir=path.parent)
