"""On-disk dataset directories: ``manifest.json`` + ``data.bin`` [+ ``labels.bin``]."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .signals import EegSample

SCHEMA_VERSION = 1


def write_dataset(path, samples, labels=None, provenance: dict | None = None) -> Path:
    """Write equal-shape samples as little-endian float32, row-major C x T each."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("no samples to write")
    first = samples[0]
    for s in samples:
        if s.data.shape != first.data.shape or s.channel_names != first.channel_names or s.fs != first.fs:
            raise ValueError("all samples in a dataset must share shape, channels and fs")
    block = np.stack([s.data for s in samples]).astype("<f4")
    (path / "data.bin").write_bytes(block.tobytes(order="C"))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_channels": first.n_channels,
        "n_times": first.n_times,
        "fs": first.fs,
        "duration_s": first.duration_s,
        "channel_names": list(first.channel_names),
        "volts_per_unit": first.volts_per_unit,
        "n_samples": len(samples),
        "has_labels": labels is not None,
        "provenance": provenance or {},
    }
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (len(samples),):
            raise ValueError("one label per sample required")
        (path / "labels.bin").write_bytes(labels.astype("<i4").tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_dataset(path):
    """Return ``(samples, labels_or_None, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
    C, T, n = manifest["n_channels"], manifest["n_times"], manifest["n_samples"]
    raw = np.frombuffer((path / "data.bin").read_bytes(), dtype="<f4")
    if raw.size != n * C * T:
        raise ValueError(f"data.bin holds {raw.size} values, manifest implies {n * C * T}")
    block = raw.reshape(n, C, T).astype(np.float64)
    names = tuple(manifest["channel_names"])
    samples = [EegSample(block[i], names, manifest["fs"], manifest["volts_per_unit"]) for i in range(n)]
    labels = None
    if (path / "labels.bin").exists():
        labels = np.frombuffer((path / "labels.bin").read_bytes(), dtype="<i4").astype(np.int64)
        if labels.size != n:
            raise ValueError("labels.bin length does not match sample count")
    return samples, labels, manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_digests(path) -> dict:
    path = Path(path)
    return {p.name: file_digest(p) for p in sorted(path.iterdir()) if p.is_file()}
