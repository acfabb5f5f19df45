"""Checkpoint archive: canonical parameter names -> little-endian float32
arrays, plus a JSON metadata record (step, config hash, RNG state)."""

from __future__ import annotations

import json

import numpy as np

from .nets import ModelBundle

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, bundle: ModelBundle, step: int, config_hash: str,
                    rng_state: dict | None = None, extra: dict | None = None):
    arrays = {
        name: np.ascontiguousarray(t.detach().numpy().astype("<f4"))
        for name, t in bundle.named_arrays().items()
    }
    meta = {
        "step": step,
        "config_hash": config_hash,
        "rng_state": rng_state,
    }
    if extra:
        meta.update(extra)
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(meta, default=str).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, bundle: ModelBundle):
    """Load arrays into the bundle in place; returns the metadata dict."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if _META_KEY not in archive:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        meta = json.loads(bytes(archive[_META_KEY].tobytes()).decode())
        arrays = {k: archive[k] for k in archive.files if k != _META_KEY}
    bundle.load_arrays(arrays)
    return meta
