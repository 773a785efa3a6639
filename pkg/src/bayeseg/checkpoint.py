"""Model checkpoints: ``params.tnsr`` (one TNSR record per mu/rho, in manifest
order) next to ``manifest.json``."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io
from .unet import BayesUNet, UNetConfig

PARAMS_FILE = "params.tnsr"
MANIFEST_FILE = "manifest.json"
ARCH_FIELDS = ("in_channels", "num_classes", "depth", "base_channels", "image_size")


class CheckpointError(ValueError):
    pass


def save(model: BayesUNet, directory, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    io.save_tnsr_records(directory / PARAMS_FILE, [t.data for _, t in named])
    manifest = {
        "format": "bayeseg-checkpoint",
        "architecture": model.config.to_dict(),
        "prior_sigma": model.config.prior_sigma,
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in named],
        **(extra or {}),
    }
    io.write_json(directory / MANIFEST_FILE, manifest)
    return directory


def load(directory, expect: UNetConfig = None) -> BayesUNet:
    directory = Path(directory)
    try:
        manifest = io.read_json(directory / MANIFEST_FILE)
    except FileNotFoundError as exc:
        raise CheckpointError(f"{directory}: no {MANIFEST_FILE}") from exc
    config = UNetConfig(**manifest["architecture"])
    if expect is not None:
        # init settings only matter before training, so they are not compared
        have = {k: config.to_dict()[k] for k in ARCH_FIELDS}
        want = {k: expect.to_dict()[k] for k in ARCH_FIELDS}
        if have != want:
            raise CheckpointError(f"checkpoint architecture {have} does not match requested {want}")
    model = BayesUNet(config, np.random.default_rng(0))
    arrays = io.load_tnsr_records(directory / PARAMS_FILE)
    named = model.named_parameters()
    if len(arrays) != len(named):
        raise CheckpointError(f"checkpoint has {len(arrays)} tensors, model expects {len(named)}")
    for (name, t), a, entry in zip(named, arrays, manifest["parameters"]):
        if entry["name"] != name or tuple(a.shape) != t.shape:
            raise CheckpointError(f"parameter {name}: checkpoint entry {entry['name']} {list(a.shape)}")
        t.data = np.array(a)
    return model
