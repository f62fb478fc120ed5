"""Versioned checkpoint files: ``<stem>.json`` manifest + ``<stem>.bin`` payload.

The payload is the concatenation of every tensor as little-endian float64 in
manifest order. Encoder-only checkpoints are the subset of entries whose
name starts with ``encoder.`` and load into any model of matching shape.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

FORMAT = "fedtrl-checkpoint"
VERSION = 1


def _paths(stem):
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(stem, tensors, meta: dict | None = None, config_hash: str | None = None):
    manifest_path, bin_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(
            t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t),
            dtype="<f8",
        )
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": arr.size})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "<f8",
        "config_hash": config_hash,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "entries": entries,
        "meta": meta or {},
    }
    bin_path.write_bytes(payload)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path, bin_path


def load_tensors(stem, prefix: str | None = None):
    """Return ``(OrderedDict name -> float64 tensor, manifest)``."""
    manifest_path, bin_path = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format/version")
    payload = bin_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ValueError(f"{bin_path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    out = OrderedDict()
    for e in manifest["entries"]:
        if prefix is not None and not e["name"].startswith(prefix):
            continue
        arr = flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float64))
    return out, manifest


def save_model(stem, model, config_hash=None, encoder_only: bool = False, meta=None):
    tensors = model.encoder_state() if encoder_only else OrderedDict(
        (k, v.detach()) for k, v in model.state_dict().items()
    )
    meta = dict(meta or {})
    meta.update({"model_config": model.config_dict(), "encoder_only": encoder_only})
    return save_tensors(stem, tensors, meta, config_hash)


def load_model_state(stem, model) -> dict:
    tensors, manifest = load_tensors(stem)
    if manifest["meta"].get("encoder_only"):
        model.load_encoder_state(tensors)
    else:
        model.load_state_dict(tensors, strict=True)
    return manifest
