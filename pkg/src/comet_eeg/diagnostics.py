"""Attention and embedding diagnostics, emitted as plain numeric tables."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .model import ModelState, as_tensors, encode_full


@dataclass
class AttentionStack:
    """``maps[layer, head]`` is a row-stochastic C x C channel attention matrix."""

    maps: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.maps.ndim == 2:
            self.maps = self.maps[None, None]
        if not np.allclose(self.maps.sum(-1), 1.0, atol=1e-9):
            raise ValueError("attention rows must sum to 1")

    @property
    def n_layers(self) -> int:
        return self.maps.shape[0]


def channel_attention(attn: np.ndarray, n_channels: int, n_patches: int) -> np.ndarray:
    """Restrict full-grid attention ``(..., n, n)`` to same-time channel pairs.

    Tokens are channel-major (``i * N + j``) with the global token last. Each
    query's weights over the channels at its own time step are renormalised,
    then averaged over time steps.
    """
    grid = attn[..., : n_channels * n_patches, : n_channels * n_patches]
    grid = grid.reshape(attn.shape[:-2] + (n_channels, n_patches, n_channels, n_patches))
    same_t = np.diagonal(grid, axis1=-3, axis2=-1)          # (..., C_q, C_k, N)
    same_t = same_t / same_t.sum(axis=-2, keepdims=True)
    return same_t.mean(axis=-1)


def attention_stack(state: ModelState, samples, batch_size: int = 16) -> AttentionStack:
    """Per-layer, per-head channel attention from unmasked encoding, averaged
    over time steps and samples."""
    ids = state.channel_ids(samples[0].channel_names)
    p = as_tensors(state.encoder_params())
    C = samples[0].n_channels
    N = samples[0].n_times // state.config.patch_len
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        x = np.stack([s.data for s in samples[start:start + batch_size]])
        _, maps = encode_full(x, ids, p, state.config, keep_attention=True)
        per_layer = np.stack([channel_attention(m, C, N) for m in maps])   # (L, B, H, C, C)
        total = total + per_layer.sum(axis=1)
        count += x.shape[0]
    return AttentionStack(total / count, state.vocab.coords_of(samples[0].channel_names))


def _pairwise_distance(coords: np.ndarray) -> np.ndarray:
    return np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))


def attention_distance(stack: AttentionStack, per_head: bool = False) -> np.ndarray:
    """Attention-weighted Euclidean distance between query and key channels,
    averaged over queries (and heads unless ``per_head``)."""
    dist = _pairwise_distance(stack.coords)
    per = (stack.maps * dist).sum(-1).mean(-1)       # (L, H)
    return per if per_head else per.mean(-1)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def nmi(attn: np.ndarray) -> tuple:
    """I(q, k) / sqrt(H(q) H(k)) with a uniform query prior.

    Returns ``(value, degenerate)``; a zero marginal entropy yields ``(0, True)``.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n_q, n_k = attn.shape
    if n_q < 2 or n_k < 2:
        raise ValueError("NMI needs at least two queries and two keys")
    joint = attn / n_q
    pq = joint.sum(axis=1)
    pk = joint.sum(axis=0)
    h_q, h_k = _entropy(pq), _entropy(pk)
    if h_q <= 0 or h_k <= 0:
        return 0.0, True
    h_joint = _entropy(joint)
    mi = h_q + h_k - h_joint
    return float(mi / np.sqrt(h_q * h_k)), False


def attention_nmi(stack: AttentionStack, per_head: bool = False) -> np.ndarray:
    values = np.zeros(stack.maps.shape[:2])
    degenerate = False
    for li in range(stack.maps.shape[0]):
        for hi in range(stack.maps.shape[1]):
            values[li, hi], flag = nmi(stack.maps[li, hi])
            degenerate |= flag
    if degenerate:
        warnings.warn("degenerate attention marginal; NMI reported as 0", RuntimeWarning)
    return values if per_head else values.mean(-1)


def head_averaged_nmi(stack: AttentionStack) -> np.ndarray:
    """NMI of the head-averaged map, one value per layer."""
    return np.array([nmi(stack.maps[li].mean(0))[0] for li in range(stack.n_layers)])


@dataclass
class ChannelClusters:
    similarity: np.ndarray
    merges: np.ndarray      # scipy linkage rows: (a, b, distance, size)
    labels: np.ndarray


def cosine_similarity_matrix(table: np.ndarray) -> np.ndarray:
    x = np.asarray(table, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero embedding row")
    u = x / norms[:, None]
    sim = np.clip(u @ u.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def channel_similarity(table, n_clusters: int = 2) -> ChannelClusters:
    """Cosine similarity and average-linkage clustering on ``1 - cosine``."""
    sim = cosine_similarity_matrix(table)
    n = sim.shape[0]
    if n < 2:
        raise ValueError("need at least two channels")
    if not 1 <= n_clusters <= n:
        raise ValueError(f"cannot cut {n} channels into {n_clusters} clusters")
    dist = np.clip(1.0 - sim, 0.0, None)
    condensed = dist[np.triu_indices(n, k=1)]
    merges = linkage(condensed, method="average")
    labels = fcluster(merges, t=n_clusters, criterion="maxclust") - 1
    return ChannelClusters(sim, merges, labels)


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r2: float


def fit_scaling(x, y) -> ScalingFit:
    """Least-squares fit of ``y = slope * ln(x) + intercept``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.size != y.size:
        raise ValueError("need at least two (x, y) points")
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    if np.all(x == x[0]):
        raise ValueError("all x equal: slope undetermined")
    A = np.column_stack([np.log(x), np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, intercept])
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return ScalingFit(float(slope), float(intercept), float(r2))
