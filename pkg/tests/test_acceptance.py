"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 share one 20-epoch pre-training run (about 4 minutes on a
single core). Run alone with ``pytest tests/test_acceptance.py -s``.
"""
import math
import time

import numpy as np
import pytest

import oracles
from comet_eeg.augment import mirror_sets, upsample2x, upsampled_visibility, window_views
from comet_eeg.cli import gradcheck_setup
from comet_eeg.diagnostics import AttentionStack, attention_distance, attention_nmi, channel_similarity, fit_scaling
from comet_eeg.diffengine import grad_check
from comet_eeg.model import ModelConfig, ModelState, sample_mask
from comet_eeg.objectives import cosine, info_nce, recon_loss
from comet_eeg.probe import linear_probe
from comet_eeg.signals import SynthConfig, synth_downstream, synth_eeg
from comet_eeg.train import AdamW, TrainConfig, assemble_batch, lr_at, momentum_at, pretrain_step, run_pretrain

SMALL = ModelConfig(dim=8, depth=1, heads=2, ff_dim=16, decoder_depth=1, decoder_dim=8, decoder_heads=2,
                    decoder_ff_dim=16, patch_len=25, max_patches=8)


def small_run_config(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 4, "model": SMALL, **kw})


def small_data(n=12):
    return synth_eeg(SynthConfig(n_channels=4, duration_s=0.5, seed=5), n)


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_gradient_fidelity(criterion):
    start = time.perf_counter()
    errors = []
    for seed in range(10):
        fn, point = gradcheck_setup(seed)
        errors.append(grad_check(fn, point))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    criterion(1, "gradient fidelity", ok, f"max rel. error {max(errors):.2e} over 10 seeds in {elapsed:.1f}s")
    assert ok


# --- 2 ----------------------------------------------------------------------

def test_criterion_2_mask_algebra(criterion):
    rng = np.random.default_rng(0)
    bad = 0
    for i in range(1000):
        C = (3, 16, 22, 62)[i % 4]
        N = int(rng.integers(1, 12))
        plan = sample_mask(C, N, 0.5, rng)
        mirror = mirror_sets(plan)
        expected = max(1, math.floor(C / 2 + 0.5))
        for j in range(N):
            visible, complement = list(plan.visible[j]), list(mirror.visible[j])
            if len(set(visible)) != expected or len(visible) != expected:
                bad += 1
            elif sorted(visible + complement) != list(range(C)):
                bad += 1
    criterion(2, "mask algebra", bad == 0, f"1000 plans, {bad} violating time steps")
    assert bad == 0


# --- 3 ----------------------------------------------------------------------

def test_criterion_3_mirror_scale_counts(criterion):
    details, ok = [], True
    for N in (4, 16, 32):
        C, l = 7, 4
        rng = np.random.default_rng(N)
        mirror = mirror_sets(sample_mask(C, N, 0.5, rng))
        up = upsample2x(rng.standard_normal((C, N * l)))
        group = window_views(up, mirror, N, l)
        count_ok = len(group) == N + 1
        per_patch = [mirror.visible[oracles.upsampled_step(j)] for j in range(1, 2 * N + 1)]
        map_ok = all(np.array_equal(upsampled_visibility(mirror)[j], per_patch[j]) for j in range(2 * N))
        for k in range(N + 1):
            for pos in range(N):
                map_ok &= np.array_equal(group.visible[k][pos], per_patch[k + pos])
        ok &= count_ok and map_ok
        details.append(f"N={N}: {len(group)} views")
    criterion(3, "mirror-scale counts", ok, ", ".join(details) + ", ceil(j/2) map checked per position")
    assert ok


# --- 4 ----------------------------------------------------------------------

def _worst(pairs):
    return max(abs(a - b) for a, b in pairs)


def test_criterion_4_loss_oracles(criterion):
    rng = np.random.default_rng(4)
    worst = {}

    pairs = []
    for _ in range(100):
        B, P, l = rng.integers(1, 4), rng.integers(2, 8), rng.integers(1, 6)
        M = rng.integers(1, P + 1)
        rec, raw = rng.standard_normal((B, P, l)), rng.standard_normal((B, P, l))
        rows = np.stack([rng.choice(P, M, replace=False) for _ in range(B)])
        pairs.append((recon_loss(rec, raw, rows).item(), oracles.recon(rec, raw, rows)))
    worst["recon_loss"] = _worst(pairs)

    pairs = []
    for _ in range(100):
        a, b = rng.standard_normal((2, rng.integers(1, 10)))
        pairs.append((cosine(a, b), oracles.cosine(a, b)))
    worst["cosine"] = _worst(pairs)

    pairs = []
    for _ in range(100):
        K, d, tau = rng.integers(2, 9), rng.integers(2, 8), rng.uniform(0.05, 1.0)
        a, t = rng.standard_normal((K, d)), rng.standard_normal((K, d))
        pairs.append((info_nce(a, t, tau).item(), oracles.info_nce(a, t, tau)))
    worst["info_nce"] = _worst(pairs)

    pairs = []
    for _ in range(100):
        n = rng.integers(2, 7)
        coords, attn = rng.random((n, 2)), rng.random((n, n))
        attn /= attn.sum(1, keepdims=True)
        pairs.append((attention_distance(AttentionStack(attn, coords))[0], oracles.attention_distance(attn, coords)))
    worst["attention_distance"] = _worst(pairs)

    pairs = []
    for _ in range(100):
        n = rng.integers(2, 7)
        attn = rng.random((n, n))
        attn /= attn.sum(1, keepdims=True)
        pairs.append((attention_nmi(AttentionStack(attn, rng.random((n, 2))))[0], oracles.nmi(attn)))
    worst["attention_nmi"] = _worst(pairs)

    pairs, order_ok = [], True
    for _ in range(100):
        table = rng.standard_normal((rng.integers(3, 9), rng.integers(2, 6)))
        out = channel_similarity(table, 2)
        brute = oracles.average_linkage((1 - out.similarity).tolist())
        pairs.extend(zip(out.merges[:, 2], [h for h, _ in brute]))
        members = {i: [i] for i in range(len(table))}
        for step, (a, b, _, _) in enumerate(out.merges):
            members[len(table) + step] = sorted(members[int(a)] + members[int(b)])
            order_ok &= members[len(table) + step] == brute[step][1]
        pairs.extend((out.similarity[i, j], oracles.cosine(table[i], table[j]))
                     for i in range(len(table)) for j in range(len(table)))
    worst["channel_similarity"] = _worst(pairs) if order_ok else math.inf

    pairs = []
    for _ in range(100):
        n = rng.integers(3, 8)
        x = rng.uniform(1, 1e4, n)
        y = 0.02 * np.log(x) + 0.5 + rng.normal(0, 0.01, n)
        fit = fit_scaling(x, y)
        pairs.extend(zip((fit.slope, fit.intercept, fit.r2), oracles.log_fit(x.tolist(), y.tolist())))
    worst["fit_scaling"] = _worst(pairs)

    log_k = max(abs(info_nce(np.ones((K, 3)), np.ones((K, 3)), 0.1).item() - math.log(K)) for K in (2, 4, 8))
    ok = all(v <= 1e-10 for v in worst.values()) and log_k <= 1e-10
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(4, "loss oracles", ok, f"worst |diff| over 100 instances each: {summary}; ln K check {log_k:.1e}")
    assert ok


# --- 5 and 6 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained():
    cfg = SynthConfig(seed=0)
    start = time.perf_counter()
    state, log = run_pretrain(synth_eeg(cfg, 500), TrainConfig(seed=0))
    return state, log, time.perf_counter() - start


def test_criterion_5_training_behaviour(criterion, pretrained):
    _, log, elapsed = pretrained
    rec, con = log.epoch_means("L_R"), log.epoch_means("L_C")
    r_ratio, c_ratio = rec[-1] / rec[0], con[-1] / con[0]
    ok = len(rec) == 20 and r_ratio <= 0.5 and c_ratio <= 0.8 and elapsed <= 15 * 60
    criterion(5, "training behaviour", ok,
              f"L_R {rec[0]:.2f} -> {rec[-1]:.2f} ({r_ratio:.1%}), L_C {con[0]:.3f} -> {con[-1]:.3f} "
              f"({c_ratio:.1%}), {elapsed:.0f}s")
    assert ok


def test_criterion_6_probe_transfer(criterion, pretrained):
    state, _, pretrain_time = pretrained
    start = time.perf_counter()
    gaps = []
    for seed in range(3):
        cfg = SynthConfig(seed=100 + seed)
        samples, labels = synth_downstream(cfg, n_classes=4, n_per_class=50)
        split = int(0.7 * len(labels))
        train, test = (samples[:split], labels[:split]), (samples[split:], labels[split:])
        _, trained = linear_probe(state, *train, *test, seed=seed)
        random_state = ModelState.initialize(state.config, cfg.vocabulary(), seed=seed)
        _, random = linear_probe(random_state, *train, *test, seed=seed)
        gaps.append((trained.balanced_accuracy, random.balanced_accuracy))
    elapsed = pretrain_time + time.perf_counter() - start
    pre, rnd = np.mean(gaps, axis=0)
    ok = pre - rnd >= 0.10 and elapsed <= 20 * 60
    criterion(6, "probe transfer", ok, f"pretrained {pre:.3f} vs random {rnd:.3f} balanced accuracy "
              f"(+{100 * (pre - rnd):.1f} points, 3 seeds), {elapsed:.0f}s with pre-training")
    assert ok


# --- 7 ----------------------------------------------------------------------

def test_criterion_7_ema_and_schedules(criterion):
    endpoints = (momentum_at(0, 100), momentum_at(100, 100), lr_at(0, 100), lr_at(100, 100))
    data = small_data()
    cfg = small_run_config(momentum_start=0.0, momentum_end=0.0)
    state = ModelState.initialize(SMALL, SynthConfig(n_channels=4).vocabulary(), 0)
    ids = state.channel_ids(data[0].channel_names)
    opt = AdamW(state.params)
    identical = True
    for step in range(4):
        batch = assemble_batch(data, [0, 1, 2, 3], SMALL, 0.5, 0, 0, step)
        state, *_ = pretrain_step(state, opt, batch, step, 4, cfg, ids)
        identical &= all(np.array_equal(state.momentum[k], state.params[k]) for k in state.momentum)
    ok = endpoints == (0.996, 1.0, 5e-4, 0.0) and identical
    criterion(7, "EMA and schedules", ok, f"momentum ({endpoints[0]}, {endpoints[1]}), lr ({endpoints[2]}, "
              f"{endpoints[3]}), momentum == online at mu=0 for 4 steps: {identical}")
    assert ok


# --- 8 ----------------------------------------------------------------------

def test_criterion_8_determinism(criterion, tmp_path):
    data = small_data()
    _, one = run_pretrain(data, small_run_config(workers=1))
    _, four = run_pretrain(data, small_run_config(workers=4))
    same_workers = one.rows() == four.rows()
    cfg = small_run_config(epochs=3)
    _, full = run_pretrain(data, cfg)
    run_pretrain(data, cfg, out_dir=tmp_path / "a", max_steps=5)
    _, resumed = run_pretrain(data, cfg, resume=tmp_path / "a" / "last")
    resume_ok = resumed.rows()[0] == full.rows()[5] and resumed.rows() == full.rows()[5:]
    ok = same_workers and resume_ok
    criterion(8, "determinism and serialization", ok,
              f"workers 1 vs 4 identical: {same_workers}; resumed next-step loss identical: {resume_ok}")
    assert ok


# --- 9 ----------------------------------------------------------------------

def test_criterion_9_scaling_fit(criterion):
    sizes = np.array([5e6, 2e7, 5e7, 1.5e8, 1.51e8])
    fit = fit_scaling(sizes, 0.013 * np.log(sizes) + 0.568)
    err = max(abs(fit.slope - 0.013), abs(fit.intercept - 0.568))
    ok = err <= 1e-10 and abs(fit.r2 - 1.0) <= 1e-12
    criterion(9, "scaling-fit recovery", ok, f"slope {fit.slope!r}, intercept {fit.intercept!r}, R^2 {fit.r2!r}")
    assert ok
