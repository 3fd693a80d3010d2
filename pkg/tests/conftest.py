"""Shared fixtures: a small on-disk dataset and a matching run config."""
import json

import pytest

from heatseg.data import SynthConfig, save_dataset, synth_generate


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Six 16x16 samples with 3 categories, written once per session."""
    root = tmp_path_factory.mktemp("tiny")
    samples = synth_generate(SynthConfig(num_samples=6, size=16, num_categories=3, seed=5))
    save_dataset(samples, root)
    return root


@pytest.fixture()
def tiny_config(tmp_path, tiny_data_dir):
    """Writes a fast training config next to tmp_path and returns its path."""

    def _write(**overrides):
        raw = {
            "seed": 1,
            "train_data": str(tiny_data_dir),
            "num_categories": 3,
            "image_size": 16,
            "c_feat": 8,
            "c_class": 4,
            "decoder_layers": 1,
            "encoder_widths": [4, 6],
            "total_steps": 4,
            "batch_size": 2,
            "precision": "single",
        }
        raw.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw), encoding="utf-8")
        return path

    return _write
