"""Patch tokenizer, channel-time embeddings, masked encoder/decoder and the
momentum encoder.

Parameters live in flat ``name -> ndarray`` dicts. Forward functions accept
the same names mapped to :class:`~comet_eeg.diffengine.Tensor` objects, so a
single code path serves training (leaves with gradients), the momentum
branch and probing (constants, no tape).
"""
from __future__ import annotations

import copy
import functools
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .signals import ChannelVocabulary

GLOBAL = -1
INIT_STD = 0.02


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 2
    ff_dim: int = 256
    decoder_depth: int = 1
    decoder_dim: int = 48
    decoder_heads: int = 2
    decoder_ff_dim: int = 192
    patch_len: int = 50
    mask_ratio: float = 0.5
    max_channels: int = 128
    max_patches: int = 64

    def __post_init__(self):
        if self.dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("hidden sizes must be divisible by head counts")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # ratios of the published Tiny model at one eighth of the depth/width budget
    "tiny8": ModelConfig(),
    "tiny": ModelConfig(dim=256, depth=6, heads=4, ff_dim=1024, decoder_depth=2, decoder_dim=384,
                        decoder_heads=4, decoder_ff_dim=1536),
    "base": ModelConfig(dim=512, depth=6, heads=8, ff_dim=2048, decoder_depth=4, decoder_dim=384,
                        decoder_heads=8, decoder_ff_dim=1536),
    "large": ModelConfig(dim=1024, depth=12, heads=16, ff_dim=4096, decoder_depth=6, decoder_dim=384,
                         decoder_heads=16, decoder_ff_dim=1536),
}


# ---------------------------------------------------------------------------
# token bookkeeping

@dataclass
class TokenGrid:
    """Tokens ``(B, n, d)`` with ``(channel, time)`` per token.

    ``index`` is ``(n, 2)`` when shared across the batch or ``(B, n, 2)``;
    the global token is marked ``(-1, -1)``.
    """

    tokens: Tensor
    index: np.ndarray

    @property
    def batch_index(self) -> np.ndarray:
        if self.index.ndim == 2:
            return np.broadcast_to(self.index, (self.tokens.shape[0],) + self.index.shape)
        return self.index


@dataclass(frozen=True)
class MaskPlan:
    """Visible channels per time step, ``visible[j]`` sorted ascending."""

    visible: np.ndarray
    n_channels: int

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.intp)
        if vis.ndim != 2:
            raise ValueError("visible must be (N, n_vis)")
        object.__setattr__(self, "visible", vis)

    @property
    def n_patches(self) -> int:
        return self.visible.shape[0]

    @property
    def n_visible(self) -> int:
        return self.visible.shape[1]

    @functools.cached_property
    def masked(self) -> np.ndarray:
        keep = np.zeros((self.n_patches, self.n_channels), dtype=bool)
        np.put_along_axis(keep, self.visible, True, axis=1)
        return np.stack([np.flatnonzero(~row) for row in keep]).reshape(self.n_patches, -1)

    def visible_pairs(self) -> np.ndarray:
        """``(n_vis * N, 2)`` (channel, time) pairs in time-major token order."""
        return self._pairs[0]

    def masked_pairs(self) -> np.ndarray:
        return self._pairs[1]

    @functools.cached_property
    def _pairs(self):
        out = []
        for sets in (self.visible, self.masked):
            j = np.repeat(np.arange(self.n_patches), sets.shape[1])
            out.append(np.stack([sets.reshape(-1), j], axis=1))
        return tuple(out)


def n_visible(n_channels: int, mask_ratio: float) -> int:
    """``max(1, round_half_up(C * (1 - r)))``."""
    return max(1, int(math.floor(n_channels * (1.0 - mask_ratio) + 0.5)))


def sample_mask(n_channels: int, n_patches: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0 < mask_ratio < 1:
        raise ValueError("mask_ratio must lie in (0, 1)")
    k = n_visible(n_channels, mask_ratio)
    order = np.argsort(rng.random((n_patches, n_channels)), axis=1)
    return MaskPlan(np.sort(order[:, :k], axis=1), n_channels)


def grid_pairs(n_channels: int, n_patches: int) -> np.ndarray:
    """Channel-major (i, j) pairs for a full grid: row ``i * N + j``."""
    i, j = np.divmod(np.arange(n_channels * n_patches), n_patches)
    return np.stack([i, j], axis=1)


# ---------------------------------------------------------------------------
# parameters

def _normal(rng, shape):
    return rng.normal(0.0, INIT_STD, size=shape)


def _block_params(rng, prefix, dim, ff_dim):
    return {
        f"{prefix}.ln1.g": np.ones(dim), f"{prefix}.ln1.b": np.zeros(dim),
        f"{prefix}.attn.wqkv": _normal(rng, (dim, 3 * dim)), f"{prefix}.attn.bqkv": np.zeros(3 * dim),
        f"{prefix}.attn.wo": _normal(rng, (dim, dim)), f"{prefix}.attn.bo": np.zeros(dim),
        f"{prefix}.ln2.g": np.ones(dim), f"{prefix}.ln2.b": np.zeros(dim),
        f"{prefix}.ff.w1": _normal(rng, (dim, ff_dim)), f"{prefix}.ff.b1": np.zeros(ff_dim),
        f"{prefix}.ff.w2": _normal(rng, (ff_dim, dim)), f"{prefix}.ff.b2": np.zeros(dim),
    }


def init_encoder(cfg: ModelConfig, n_vocab: int, rng: np.random.Generator) -> dict:
    d = cfg.dim
    p = {
        "enc.patch.w": _normal(rng, (cfg.patch_len, d)), "enc.patch.b": np.zeros(d),
        "enc.chan": _normal(rng, (n_vocab, d)), "enc.time": _normal(rng, (cfg.max_patches, d)),
        "enc.global": _normal(rng, (d,)),
    }
    for n in range(cfg.depth):
        p.update(_block_params(rng, f"enc.layers.{n}", d, cfg.ff_dim))
    p.update({"enc.norm.g": np.ones(d), "enc.norm.b": np.zeros(d)})
    return p


def init_decoder(cfg: ModelConfig, n_vocab: int, rng: np.random.Generator) -> dict:
    dd = cfg.decoder_dim
    p = {
        "dec.proj.w": _normal(rng, (cfg.dim, dd)), "dec.proj.b": np.zeros(dd),
        "dec.mask": _normal(rng, (dd,)),
        "dec.chan": _normal(rng, (n_vocab, dd)), "dec.time": _normal(rng, (cfg.max_patches, dd)),
    }
    for n in range(cfg.decoder_depth):
        p.update(_block_params(rng, f"dec.layers.{n}", dd, cfg.decoder_ff_dim))
    p.update({
        "dec.norm.g": np.ones(dd), "dec.norm.b": np.zeros(dd),
        "dec.head.w": _normal(rng, (dd, cfg.patch_len)), "dec.head.b": np.zeros(cfg.patch_len),
    })
    return p


@dataclass
class ModelState:
    """Online encoder + decoder (``params``) and the momentum encoder copy."""

    config: ModelConfig
    vocab: ChannelVocabulary
    params: dict
    momentum: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: ChannelVocabulary, seed: int = 0) -> "ModelState":
        if len(vocab) > config.max_channels:
            raise ValueError(f"vocabulary of {len(vocab)} exceeds max_channels={config.max_channels}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31337]))
        params = init_encoder(config, len(vocab), rng)
        params.update(init_decoder(config, len(vocab), rng))
        momentum = {k: v.copy() for k, v in params.items() if k.startswith("enc.")}
        return cls(config, vocab, params, momentum)

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def channel_ids(self, names, allow_new: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Vocabulary rows for ``names``.

        Unknown names raise ``KeyError`` unless ``allow_new``; then fresh
        embedding rows drawn from N(0, 0.02^2) are appended to every table.
        """
        unknown = [n for n in names if n not in self.vocab.names]
        if unknown and not allow_new:
            raise KeyError(f"unknown channel(s): {', '.join(unknown)}")
        if unknown:
            rng = rng or np.random.default_rng(0)
            if len(self.vocab) + len(unknown) > self.config.max_channels:
                raise ValueError("max_channels exceeded")
            self.vocab = self.vocab.extended(unknown, rng)
            for table in (self.params, self.momentum):
                for key in ("enc.chan", "dec.chan"):
                    if key in table:
                        rows = _normal(rng, (len(unknown), table[key].shape[1]))
                        table[key] = np.vstack([table[key], rows])
        return self.vocab.index_of(names)


def as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward pieces

def patchify(signal, p: dict, patch_len: int, prefix: str = "enc") -> TokenGrid:
    """Strided 1-D convolution (kernel == stride == ``patch_len``) per channel.

    ``signal`` is ``(B, C, T)`` or ``(C, T)``; returns a full channel-major
    grid of ``C * N`` tokens.
    """
    x = np.asarray(signal.data if hasattr(signal, "channel_names") else signal, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, C, T = x.shape
    if T < patch_len:
        raise ValueError(f"signal length {T} shorter than patch length {patch_len}")
    if T % patch_len:
        warnings.warn(f"truncating {T % patch_len} trailing samples to a whole number of patches", RuntimeWarning)
        x = x[..., : T - T % patch_len]
    N = x.shape[-1] // patch_len
    out = de.conv1d(Tensor(x), p[f"{prefix}.patch.w"], p[f"{prefix}.patch.b"], stride=patch_len)
    return TokenGrid(de.reshape(out, (B, C * N, out.shape[-1])), grid_pairs(C, N))


def embed(grid: TokenGrid, channel_ids: np.ndarray, p: dict, prefix: str = "enc") -> TokenGrid:
    """Add channel and temporal embedding rows: e = x + e^c_i + e^t_j."""
    idx = grid.index
    if (idx[..., 1] >= p[f"{prefix}.time"].shape[0]).any():
        raise ValueError("more temporal patches than the temporal embedding table holds")
    chan = de.take(p[f"{prefix}.chan"], channel_ids[idx[..., 0]], axis=0)
    time = de.take(p[f"{prefix}.time"], idx[..., 1], axis=0)
    return TokenGrid(grid.tokens + chan + time, idx)


def select_tokens(grid: TokenGrid, pairs_per_sample, n_patches: int) -> TokenGrid:
    """Gather the tokens at the given (channel, time) pairs of a full grid."""
    pairs = np.stack(pairs_per_sample)  # (B, n, 2)
    flat = pairs[..., 0] * n_patches + pairs[..., 1]
    rows = np.arange(pairs.shape[0])[:, None]
    return TokenGrid(grid.tokens[rows, flat], pairs)


def append_global(grid: TokenGrid, e_g: Tensor) -> TokenGrid:
    B, _, d = grid.tokens.shape
    g = de.add(Tensor(np.zeros((B, 1, d))), e_g)
    idx = grid.batch_index
    gidx = np.full((B, 1, 2), GLOBAL)
    return TokenGrid(de.concat([grid.tokens, g], axis=1), np.concatenate([idx, gidx], axis=1))


def _affine_norm(x: Tensor, p: dict, name: str) -> Tensor:
    return de.layernorm(x) * p[f"{name}.g"] + p[f"{name}.b"]


def _self_attention(x: Tensor, p: dict, name: str, heads: int):
    B, n, d = x.shape
    dh = d // heads
    qkv = x @ p[f"{name}.wqkv"] + p[f"{name}.bqkv"]
    qkv = de.transpose(de.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ de.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = de.softmax(scores)
    ctx = de.reshape(de.transpose(attn @ v, (0, 2, 1, 3)), (B, n, d))
    return ctx @ p[f"{name}.wo"] + p[f"{name}.bo"], attn.data


def transformer(x: Tensor, p: dict, prefix: str, depth: int, heads: int, keep_attention: bool = False):
    """Pre-LN blocks followed by a final layernorm."""
    maps = []
    for n in range(depth):
        name = f"{prefix}.layers.{n}"
        h, attn = _self_attention(_affine_norm(x, p, f"{name}.ln1"), p, f"{name}.attn", heads)
        if keep_attention:
            maps.append(attn)
        x = x + h
        h = _affine_norm(x, p, f"{name}.ln2")
        h = de.gelu(h @ p[f"{name}.ff.w1"] + p[f"{name}.ff.b1"]) @ p[f"{name}.ff.w2"] + p[f"{name}.ff.b2"]
        x = x + h
    return _affine_norm(x, p, f"{prefix}.norm"), maps


def encode(grid: TokenGrid, p: dict, cfg: ModelConfig, prefix: str = "enc", keep_attention: bool = False):
    """Run the encoder over visible tokens plus exactly one global token.

    Returns ``(TokenGrid, attention_maps)``; maps are ``(B, heads, n, n)``
    per layer and only collected when ``keep_attention``.
    """
    n_global = (grid.batch_index[..., 0] == GLOBAL).sum(axis=1)
    if not np.all(n_global == 1):
        raise ValueError("encoder input needs exactly one global token per sample")
    out, maps = transformer(grid.tokens, p, prefix, cfg.depth, cfg.heads, keep_attention)
    return TokenGrid(out, grid.index), maps


def split_global(grid: TokenGrid):
    """Return ``(patch_grid, global_tokens (B, d))``."""
    idx = grid.batch_index
    gpos = np.argmax(idx[..., 0] == GLOBAL, axis=1)
    rows = np.arange(idx.shape[0])
    keep = np.stack([np.flatnonzero(idx[b, :, 0] != GLOBAL) for b in rows])
    patches = TokenGrid(grid.tokens[rows[:, None], keep], idx[rows[:, None], keep])
    return patches, grid.tokens[rows, gpos]


def decode(encoded: TokenGrid, plans, channel_ids: np.ndarray, p: dict, cfg: ModelConfig) -> Tensor:
    """Reconstruct every patch: ``(B, C * N, patch_len)`` in channel-major order.

    ``encoded`` holds the encoder outputs of the visible patches (global token
    already removed) in each plan's ``visible_pairs`` order.
    """
    B = encoded.tokens.shape[0]
    C, N = plans[0].n_channels, plans[0].n_patches
    idx = encoded.batch_index
    for b, plan in enumerate(plans):
        if not np.array_equal(idx[b], plan.visible_pairs()):
            raise ValueError("encoded tokens do not match the mask plan's visible positions")
    dd = cfg.decoder_dim
    vis = encoded.tokens @ p["dec.proj.w"] + p["dec.proj.b"]
    n_mask = C * N - vis.shape[1]
    filler = de.add(Tensor(np.zeros((B, n_mask, dd))), p["dec.mask"])
    stacked = de.concat([vis, filler], axis=1)
    # position of each grid cell inside ``stacked``
    order = np.empty((B, C * N), dtype=np.intp)
    for b, plan in enumerate(plans):
        cells = np.concatenate([plan.visible_pairs(), plan.masked_pairs()])
        order[b, cells[:, 0] * N + cells[:, 1]] = np.arange(C * N)
    full = stacked[np.arange(B)[:, None], order]
    pairs = grid_pairs(C, N)
    pos = de.take(p["dec.chan"], channel_ids[pairs[:, 0]], axis=0) + de.take(p["dec.time"], pairs[:, 1], axis=0)
    h, _ = transformer(full + pos, p, "dec", cfg.decoder_depth, cfg.decoder_heads)
    return h @ p["dec.head.w"] + p["dec.head.b"]


def momentum_encode(view_signal, view_pairs, channel_ids: np.ndarray, momentum: dict, cfg: ModelConfig) -> np.ndarray:
    """Global-token output of the momentum encoder; patch outputs are dropped.

    ``view_signal`` is ``(B, C, N * l)``; ``view_pairs`` lists the visible
    (channel, window-position) pairs per sample.
    """
    p = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in momentum.items()}
    grid = patchify(view_signal, p, cfg.patch_len)
    grid = embed(grid, channel_ids, p)
    N = view_signal.shape[-1] // cfg.patch_len
    grid = select_tokens(grid, view_pairs, N)
    grid = append_global(grid, p["enc.global"])
    out, _ = encode(grid, p, cfg)
    return split_global(out)[1].data


def encode_full(signal, channel_ids: np.ndarray, p: dict, cfg: ModelConfig, keep_attention: bool = False):
    """Unmasked encode of the whole grid (probing and diagnostics)."""
    grid = embed(patchify(signal, p, cfg.patch_len), channel_ids, p)
    grid = append_global(grid, p["enc.global"])
    return encode(grid, p, cfg, keep_attention=keep_attention)


def ema_update(momentum: dict, online: dict, mu: float) -> dict:
    """theta_m <- mu * theta_m + (1 - mu) * theta_o."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("momentum coefficient must lie in [0, 1]")
    if mu == 1.0:
        return {k: v.copy() for k, v in momentum.items()}
    if mu == 0.0:
        return {k: online[k].copy() for k in momentum}
    return {k: mu * v + (1.0 - mu) * online[k] for k, v in momentum.items()}
