"""Checkpoint directories: ``checkpoint.json`` manifest + ``params.bin`` blobs.

Every array is stored as little-endian float64 so a save/load cycle is
bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState
from .signals import ChannelVocabulary

FORMAT_VERSION = 1


def _pack(groups: dict) -> tuple:
    index, chunks, offset = {}, [], 0
    for group, table in groups.items():
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            key = f"{group}/{name}"
            index[key] = {"offset": offset, "shape": list(arr.shape)}
            raw = arr.tobytes()
            chunks.append(raw)
            offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, state: ModelState, optimizer=None, *, step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups = {"online": state.params, "momentum": state.momentum}
    if optimizer is not None:
        groups["adam.m"] = optimizer.m
        groups["adam.v"] = optimizer.v
    index, blob = _pack(groups)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": state.config.to_dict(),
        "vocab": {"names": list(state.vocab.names), "coords": state.vocab.coords.tolist()},
        "step": step,
        "optimizer_step": optimizer.t if optimizer is not None else None,
        "index": index,
        **(extra or {}),
    }
    (path / "params.bin").write_bytes(blob)
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    """Return ``(state, manifest, optimizer_moments)``.

    ``optimizer_moments`` is ``None`` or ``(t, m, v)``.
    """
    path = Path(path)
    if path.is_file():
        path = path.parent
    manifest = json.loads((path / "checkpoint.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format")
    blob = (path / "params.bin").read_bytes()
    groups: dict = {}
    for key, entry in manifest["index"].items():
        group, name = key.split("/", 1)
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        groups.setdefault(group, {})[name] = arr.reshape(entry["shape"]).astype(np.float64)
    vocab = ChannelVocabulary(tuple(manifest["vocab"]["names"]), np.array(manifest["vocab"]["coords"]))
    state = ModelState(ModelConfig(**manifest["model_config"]), vocab, groups["online"], groups.get("momentum", {}))
    moments = None
    if "adam.m" in groups:
        moments = (manifest["optimizer_step"], groups["adam.m"], groups["adam.v"])
    return state, manifest, moments
