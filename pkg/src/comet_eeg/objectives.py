"""Masked-patch reconstruction, cosine similarity and InfoNCE."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Tensor


@dataclass
class LossReport:
    recon: float
    contrastive: float
    total: float
    rho_pos: float
    rho_neg: float
    tau: float
    lam: float

    def as_dict(self) -> dict:
        return asdict(self)


def recon_loss(rec, raw, masked_rows) -> Tensor:
    """Mean over masked patches of the squared L2 norm of the patch error.

    ``rec`` and ``raw`` are ``(B, P, l)``; ``masked_rows`` is ``(B, M)``
    indices into the patch axis.
    """
    rec, raw = de.as_tensor(rec), de.as_tensor(raw)
    masked_rows = np.asarray(masked_rows, dtype=np.intp)
    if masked_rows.ndim != 2 or masked_rows.shape[1] == 0:
        raise ValueError("reconstruction loss needs at least one masked patch")
    if rec.shape != raw.shape:
        raise de.ShapeError("recon_loss", rec.shape, raw.shape)
    rows = np.arange(rec.shape[0])[:, None]
    diff = rec[rows, masked_rows] - raw[rows, masked_rows]
    return de.mean(de.sum_(de.square(diff), axis=-1))


def cosine(e1, e2) -> float:
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(e1 @ e2 / (n1 * n2))


def normalize_rows(x: Tensor) -> Tensor:
    if np.any((x.data * x.data).sum(-1) == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    norm = de.sqrt(de.sum_(de.square(x), axis=-1, keepdims=True))
    return x / de.broadcast_to(norm, x.shape)


def similarity_matrix(anchors, targets) -> Tensor:
    """Pairwise cosine similarities ``rho[i, j]`` (anchors x targets)."""
    a = normalize_rows(de.as_tensor(anchors))
    t = normalize_rows(de.as_tensor(targets))
    return a @ de.transpose(t)


def info_nce(anchors, targets, tau: float = 0.1, positive=None) -> Tensor:
    """One-directional InfoNCE; anchor ``i``'s positive is ``targets[positive[i]]``
    and every other target in the batch is a negative."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    anchors, targets = de.as_tensor(anchors), de.as_tensor(targets)
    K = anchors.shape[0]
    if K < 2 or targets.shape[0] != K:
        raise ValueError("InfoNCE needs K >= 2 anchors and as many targets")
    positive = np.arange(K) if positive is None else np.asarray(positive)
    logits = similarity_matrix(anchors, targets) * (1.0 / tau)
    pos = logits[np.arange(K), positive]
    return de.mean(de.logsumexp(logits) - pos)


def pair_stats(anchors, targets) -> tuple:
    """Mean positive and mean negative cosine similarity."""
    rho = similarity_matrix(anchors, targets).data
    K = rho.shape[0]
    off = ~np.eye(K, dtype=bool)
    return float(np.mean(np.diag(rho))), float(rho[off].mean())


def total_loss(recon, contrastive, lam: float = 1.0):
    """``recon + lam * contrastive``; ``lam == 0`` drops the contrastive graph."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return recon
    return recon + contrastive * lam
