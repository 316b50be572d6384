"""Mirror-scale views for the contrastive branch.

The momentum encoder sees the channels the masked branch did *not* see at
each time step, on a copy of the signal upsampled to twice the sampling
rate and cut into ``N + 1`` patch-aligned windows of ``N`` patches.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import MaskPlan
from .signals import EegSample


def mirror_sets(plan: MaskPlan) -> MaskPlan:
    """Per-step complement of the visible channel sets."""
    return MaskPlan(plan.masked, plan.n_channels)


def upsample2x(sample):
    """Linear interpolation to twice the sampling rate.

    Original samples land on even indices, midpoints on odd ones; the final
    odd sample is extrapolated along the last segment so ramps stay exact.
    Accepts an :class:`EegSample` or an array with time on the last axis.
    """
    x = sample.data if isinstance(sample, EegSample) else np.asarray(sample, dtype=np.float64)
    T = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * T,))
    out[..., 0::2] = x
    if T > 1:
        out[..., 1:-1:2] = 0.5 * (x[..., :-1] + x[..., 1:])
        out[..., -1] = x[..., -1] + 0.5 * (x[..., -1] - x[..., -2])
    else:
        out[..., 1] = x[..., 0]
    if isinstance(sample, EegSample):
        return replace(sample, data=out, fs=2 * sample.fs)
    return out


def upsampled_visibility(mirror: MaskPlan) -> np.ndarray:
    """Visible channels of each of the ``2N`` upsampled patches.

    With 1-based patch index ``j`` the set is that of original step
    ``ceil(j / 2)``; 0-based this is ``u // 2``.
    """
    return np.repeat(mirror.visible, 2, axis=0)


@dataclass(frozen=True)
class ViewGroup:
    """All ``N + 1`` windows of one upsampled sample."""

    source_id: int
    signal: np.ndarray          # (C, 2N * l) upsampled signal
    offsets: np.ndarray         # window start, in patches
    visible: np.ndarray         # (N + 1, N, n_mirror) channel sets per window position
    n_patches: int
    patch_len: int

    def __len__(self):
        return len(self.offsets)

    def view(self, k: int) -> np.ndarray:
        start = self.offsets[k] * self.patch_len
        return self.signal[:, start: start + self.n_patches * self.patch_len]

    def view_pairs(self, k: int) -> np.ndarray:
        """(channel, window-position) pairs visible in view ``k``, time-major."""
        vis = self.visible[k]
        j = np.repeat(np.arange(self.n_patches), vis.shape[1])
        return np.stack([vis.reshape(-1), j], axis=1)


def window_views(upsampled, mirror: MaskPlan, n_patches: int, patch_len: int, source_id: int = 0) -> ViewGroup:
    """Slide an ``N``-patch window with a one-patch stride over ``2N`` patches."""
    x = upsampled.data if isinstance(upsampled, EegSample) else np.asarray(upsampled)
    if x.shape[-1] != 2 * n_patches * patch_len:
        raise ValueError(f"expected {2 * n_patches * patch_len} upsampled samples, got {x.shape[-1]}")
    if mirror.n_patches != n_patches:
        raise ValueError("mirror plan covers a different number of time steps")
    per_patch = upsampled_visibility(mirror)
    offsets = np.arange(n_patches + 1)
    visible = np.stack([per_patch[k: k + n_patches] for k in offsets])
    return ViewGroup(source_id, x, offsets, visible, n_patches, patch_len)


def make_pairs(k: int):
    """Anchor ``i`` pairs with target ``i``; every other target is a negative.

    Returns ``(positive (K,), negatives (K, K-1))``.
    """
    if k < 2:
        raise ValueError("contrastive pairing needs a batch of at least 2")
    positive = np.arange(k)
    negatives = np.stack([np.delete(positive, i) for i in range(k)])
    return positive, negatives
