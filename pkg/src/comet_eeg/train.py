"""Pre-training: batch assembly, combined loss, AdamW, schedules, EMA."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .augment import mirror_sets, upsample2x, window_views
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (PRESETS, ModelConfig, ModelState, append_global, as_tensors, decode, embed,
                    ema_update, encode, momentum_encode, patchify, sample_mask, select_tokens,
                    split_global)
from .objectives import LossReport, info_nce, pair_stats, recon_loss, total_loss

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    peak_lr: float = 5e-4
    weight_decay_start: float = 0.0
    weight_decay_end: float = 1e-6
    tau: float = 0.1
    lam: float = 1.0
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    mask_ratio: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0
    workers: int = 1
    model: ModelConfig = field(default_factory=lambda: PRESETS["tiny8"])

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if not 0 <= self.momentum_start <= self.momentum_end <= 1:
            raise ValueError("momentum range must satisfy 0 <= start <= end <= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tau <= 0 or self.lam < 0:
            raise ValueError("tau must be positive and lam non-negative")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if isinstance(d.get("model"), str):
            d["model"] = PRESETS[d["model"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# schedules

def lr_at(step: int, total_steps: int, peak: float = 5e-4) -> float:
    """Cosine annealing from ``peak`` to 0."""
    return peak * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def momentum_at(step: int, total_steps: int, start: float = 0.996, end: float = 1.0) -> float:
    return start + (end - start) * step / total_steps


def wd_at(step: int, total_steps: int, start: float = 0.0, end: float = 1e-6) -> float:
    """Cosine ramp of the weight-decay coefficient from ``start`` to ``end``."""
    return end + (start - end) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adam with decoupled weight decay (decay scaled by the learning rate)."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float, weight_decay: float = 0.0) -> dict:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - lr * weight_decay * p - lr * update
        return out


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple:
    # fsum: exact, so the norm does not depend on dict order (resume safety)
    norm = math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    sample_ids: np.ndarray
    raw: np.ndarray            # (B, C, T)
    plans: list
    views: np.ndarray          # (B, C, N * l) selected mirror-scale window
    view_pairs: list
    view_offsets: np.ndarray

    @property
    def size(self) -> int:
        return self.raw.shape[0]


def _step_rng(seed: int, epoch: int, step: int, sample_id: int, stream: int = 11) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, epoch, step, int(sample_id)]))


def _prepare(data: np.ndarray, sample_id: int, cfg: ModelConfig, mask_ratio: float, rng):
    C, T = data.shape
    l = cfg.patch_len
    N = T // l
    data = data[:, : N * l]
    plan = sample_mask(C, N, mask_ratio, rng)
    group = window_views(upsample2x(data), mirror_sets(plan), N, l, int(sample_id))
    k = int(rng.integers(len(group)))
    return data, plan, group.view(k), group.view_pairs(k), k


def assemble_batch(samples, ids, cfg: ModelConfig, mask_ratio: float, seed: int, epoch: int, step: int,
                   workers: int = 1, stream: int = 11) -> Batch:
    """Masks and view choices depend only on (seed, epoch, step, sample id)."""
    def job(sid):
        return _prepare(samples[sid].data, sid, cfg, mask_ratio, _step_rng(seed, epoch, step, sid, stream))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, ids))
    else:
        parts = [job(sid) for sid in ids]
    return Batch(
        sample_ids=np.asarray(ids),
        raw=np.stack([p[0] for p in parts]),
        plans=[p[1] for p in parts],
        views=np.stack([p[2] for p in parts]),
        view_pairs=[p[3] for p in parts],
        view_offsets=np.array([p[4] for p in parts]),
    )


# ---------------------------------------------------------------------------
# losses

def forward_losses(p: dict, batch: Batch, channel_ids: np.ndarray, cfg: ModelConfig, targets: np.ndarray,
                   tau: float, lam: float):
    """Return ``(total, recon, contrastive, online_globals)`` as tensors."""
    B, C, T = batch.raw.shape
    l = cfg.patch_len
    N = T // l
    grid = embed(patchify(batch.raw, p, l), channel_ids, p)
    vis = select_tokens(grid, [plan.visible_pairs() for plan in batch.plans], N)
    out, _ = encode(append_global(vis, p["enc.global"]), p, cfg)
    patches, g_online = split_global(out)
    rec = decode(patches, batch.plans, channel_ids, p, cfg)
    raw_patches = batch.raw.reshape(B, C * N, l)
    masked_rows = np.stack([mp[:, 0] * N + mp[:, 1] for mp in (pl.masked_pairs() for pl in batch.plans)])
    l_r = recon_loss(rec, raw_patches, masked_rows)
    if lam > 0:
        l_c = info_nce(g_online, targets, tau)
    else:
        l_c = info_nce(de.Tensor(g_online.data), targets, tau)
    return total_loss(l_r, l_c, lam), l_r, l_c, g_online


def loss_function(state: ModelState, batch: Batch, tcfg: TrainConfig, channel_ids: np.ndarray):
    """A pure function of the online parameters for gradient checking.

    Returns ``(names, fn)``; ``fn(*tensors)`` gives the total loss with masks,
    views and momentum targets frozen.
    """
    targets = momentum_encode(batch.views, batch.view_pairs, channel_ids, state.momentum, state.config)
    names = sorted(state.params)

    def fn(*tensors):
        p = dict(zip(names, tensors))
        return forward_losses(p, batch, channel_ids, state.config, targets, tcfg.tau, tcfg.lam)[0]

    return names, fn


def pretrain_step(state: ModelState, optimizer: AdamW, batch: Batch, step: int, total_steps: int,
                  tcfg: TrainConfig, channel_ids: np.ndarray):
    """One update of the online branch followed by the EMA of the momentum encoder.

    Returns ``(new_state, LossReport, lr, mu)``; raises :class:`NonFiniteLoss`
    with ``state`` untouched if the loss is not finite.
    """
    cfg = state.config
    targets = momentum_encode(batch.views, batch.view_pairs, channel_ids, state.momentum, cfg)
    leaves = as_tensors(state.params, requires_grad=True)
    total, l_r, l_c, g_online = forward_losses(leaves, batch, channel_ids, cfg, targets, tcfg.tau, tcfg.lam)
    if not np.isfinite(total.data):
        log.error("non-finite loss at step %d (L_R=%s, L_C=%s); step aborted", step, l_r.data, l_c.data)
        raise NonFiniteLoss(f"non-finite loss at step {step}")
    table = de.backward(total, wrt=leaves.values())
    grads = {k: table[id(t)] for k, t in leaves.items()}
    grads, _ = clip_by_global_norm(grads, tcfg.grad_clip)
    lr = lr_at(step, total_steps, tcfg.peak_lr)
    wd = wd_at(step, total_steps, tcfg.weight_decay_start, tcfg.weight_decay_end)
    params = optimizer.step(state.params, grads, lr, wd)
    mu = momentum_at(step, total_steps, tcfg.momentum_start, tcfg.momentum_end)
    momentum = ema_update(state.momentum, params, mu)
    rho_pos, rho_neg = pair_stats(g_online.data, targets)
    report = LossReport(float(l_r.data), float(l_c.data), float(total.data), rho_pos, rho_neg, tcfg.tau, tcfg.lam)
    return ModelState(cfg, state.vocab, params, momentum), report, lr, mu


def evaluate(state: ModelState, samples, ids, tcfg: TrainConfig, channel_ids, tag: int = 0) -> LossReport:
    """Loss on held-out samples with a fixed mask/view stream; no updates."""
    B = min(tcfg.batch_size, len(ids))
    reports = []
    for b in range(len(ids) // B):
        chunk = ids[b * B:(b + 1) * B]
        batch = assemble_batch(samples, chunk, state.config, tcfg.mask_ratio, tcfg.seed, tag, b, stream=13)
        targets = momentum_encode(batch.views, batch.view_pairs, channel_ids, state.momentum, state.config)
        total, l_r, l_c, g = forward_losses(as_tensors(state.params), batch, channel_ids, state.config,
                                            targets, tcfg.tau, tcfg.lam)
        rp, rn = pair_stats(g.data, targets)
        reports.append(LossReport(float(l_r.data), float(l_c.data), float(total.data), rp, rn, tcfg.tau, tcfg.lam))
    keys = ("recon", "contrastive", "total", "rho_pos", "rho_neg")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return LossReport(tau=tcfg.tau, lam=tcfg.lam, **means)


# ---------------------------------------------------------------------------
# driver

CSV_FIELDS = ("step", "lr", "mu", "L_R", "L_C", "total", "rho_pos", "rho_neg")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    wall_time: float = 0.0

    def append(self, step: int, epoch: int, lr: float, mu: float, report: LossReport) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append({"step": step, "epoch": epoch, "lr": lr, "mu": mu, "L_R": report.recon,
                             "L_C": report.contrastive, "total": report.total,
                             "rho_pos": report.rho_pos, "rho_neg": report.rho_neg})

    def epoch_means(self, key: str) -> np.ndarray:
        epochs = sorted({r["epoch"] for r in self.records})
        return np.array([np.mean([r[key] for r in self.records if r["epoch"] == e]) for e in epochs])

    def rows(self) -> list:
        return [tuple(r[k] for k in CSV_FIELDS) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple:
    perm = np.random.default_rng(np.random.SeedSequence([seed, 5])).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def run_pretrain(samples, tcfg: TrainConfig, *, vocab=None, out_dir=None, resume=None,
                 max_steps: int | None = None, state: ModelState | None = None):
    """Train on ``samples``; returns ``(state, TrainLog)``.

    Checkpoints go to ``out_dir/best`` (lowest validation total loss) and
    ``out_dir/last``. ``resume`` points at a checkpoint written by this
    function; the run continues from its step with identical randomness.
    ``max_steps`` stops early (used for resumption tests).
    """
    if not samples:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    train_ids, val_ids = split_indices(len(samples), tcfg.seed, tcfg.val_fraction)
    spe = len(train_ids) // tcfg.batch_size
    if spe == 0:
        raise ValueError(f"{len(train_ids)} training samples cannot fill one batch of {tcfg.batch_size}")
    total_steps = tcfg.epochs * spe

    start_step, best_val = 0, math.inf
    if resume is not None:
        state, manifest, moments = load_checkpoint(resume)
        optimizer = AdamW(state.params, tcfg.betas, tcfg.adam_eps)
        if moments is not None:
            optimizer.t, optimizer.m, optimizer.v = moments
        start_step = manifest["step"]
        best_val = manifest.get("best_val", math.inf)
    else:
        if state is None:
            if vocab is None:
                from .signals import ChannelVocabulary, grid_vocabulary
                vocab = grid_vocabulary(samples[0].n_channels)
                if tuple(samples[0].channel_names) != vocab.names:
                    raise ValueError("pass a vocabulary covering the dataset's channel names")
            state = ModelState.initialize(tcfg.model, vocab, tcfg.seed)
        optimizer = AdamW(state.params, tcfg.betas, tcfg.adam_eps)
    channel_ids = state.channel_ids(samples[0].channel_names)

    def checkpoint(tag, step):
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / tag, state, optimizer, step=step,
                            extra={"train_config": tcfg.to_dict(), "best_val": best_val,
                                   "schedule": {"total_steps": total_steps, "steps_per_epoch": spe},
                                   "rng": {"seed": tcfg.seed, "next_step": step}})

    trainlog = TrainLog()
    end_step = total_steps if max_steps is None else min(total_steps, max_steps)
    step = start_step
    while step < end_step:
        epoch, b = divmod(step, spe)
        order = train_ids[np.random.default_rng(np.random.SeedSequence([tcfg.seed, 7, epoch])).permutation(len(train_ids))]
        ids = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
        batch = assemble_batch(samples, ids, state.config, tcfg.mask_ratio, tcfg.seed, epoch, step, tcfg.workers)
        state, report, lr, mu = pretrain_step(state, optimizer, batch, step, total_steps, tcfg, channel_ids)
        trainlog.append(step, epoch, lr, mu, report)
        step += 1
        if step % spe == 0 and len(val_ids) >= 2:
            val = evaluate(state, samples, val_ids, tcfg, channel_ids)
            trainlog.validation.append({"epoch": epoch, **val.as_dict()})
            log.info("epoch %d: L_R=%.4f L_C=%.4f val=%.4f", epoch + 1,
                     trainlog.epoch_means("L_R")[-1], trainlog.epoch_means("L_C")[-1], val.total)
            if val.total < best_val:
                best_val = val.total
                checkpoint("best", step)
    checkpoint("last", step)
    trainlog.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        trainlog.to_csv(Path(out_dir) / "train_log.csv")
    return state, trainlog
