import math

import numpy as np
import pytest

from comet_eeg import train as tr
from comet_eeg.checkpoint import load_checkpoint, save_checkpoint
from comet_eeg.model import ModelConfig, ModelState
from comet_eeg.signals import SynthConfig, synth_eeg
from comet_eeg.train import (AdamW, NonFiniteLoss, TrainConfig, TrainLog, assemble_batch, clip_by_global_norm,
                             lr_at, momentum_at, pretrain_step, run_pretrain, split_indices, wd_at)

SMALL = ModelConfig(dim=8, depth=1, heads=2, ff_dim=16, decoder_depth=1, decoder_dim=8, decoder_heads=2,
                    decoder_ff_dim=16, patch_len=5, max_patches=8)


def small_data(n=24, C=4, seed=0):
    return synth_eeg(SynthConfig(n_channels=C, duration_s=20 / 200, seed=seed), n)


def small_config(**kw):
    base = dict(epochs=2, batch_size=4, model=SMALL, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- schedules --------------------------------------------------------------

def test_lr_schedule_points():
    assert lr_at(0, 100) == 5e-4
    assert lr_at(100, 100) == 0.0
    assert lr_at(50, 100) == pytest.approx(2.5e-4, abs=1e-18)


def test_momentum_schedule_points():
    assert momentum_at(0, 100) == 0.996
    assert momentum_at(100, 100) == 1.0
    assert momentum_at(50, 100) == pytest.approx(0.998, abs=1e-15)


def test_weight_decay_schedule():
    assert wd_at(0, 10) == 0.0
    assert wd_at(10, 10) == pytest.approx(1e-6, abs=1e-21)
    values = [wd_at(s, 10) for s in range(11)]
    assert values == sorted(values)


# --- optimizer --------------------------------------------------------------

def test_adamw_zero_gradient_no_decay_is_identity():
    p = {"w": np.random.default_rng(0).standard_normal(4)}
    opt = AdamW(p)
    out = opt.step(p, {"w": np.zeros(4)}, lr=1e-3, weight_decay=0.0)
    assert np.array_equal(out["w"], p["w"])


def test_adamw_matches_hand_rolled_reference():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(3)
    grads = [rng.standard_normal(3) for _ in range(4)]
    opt = AdamW({"w": w})
    p = {"w": w}
    m = v = np.zeros(3)
    ref = w.copy()
    for t, g in enumerate(grads, start=1):
        p = opt.step(p, {"w": g}, lr=0.01, weight_decay=0.1)
        ref = ref * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    out = AdamW(p).step(p, {"w": np.array([0.0])}, lr=0.1, weight_decay=0.5)
    assert out["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert math.sqrt(sum(float((g ** 2).sum()) for g in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same["a"][0] == 3.0


# --- config -----------------------------------------------------------------

def test_config_roundtrip_and_validation():
    cfg = small_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(momentum_start=0.9, momentum_end=0.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    assert TrainConfig.from_dict({"model": "tiny8"}).model == ModelConfig()


def test_split_is_ninety_ten():
    train_ids, val_ids = split_indices(100, seed=0)
    assert len(train_ids) == 90 and len(val_ids) == 10
    assert not set(train_ids) & set(val_ids)


# --- step -------------------------------------------------------------------

def _step_setup(lam=1.0, seed=0):
    data = small_data(8)
    cfg = small_config(lam=lam)
    state = ModelState.initialize(SMALL, SynthConfig(n_channels=4).vocabulary(), seed)
    ids = state.channel_ids(data[0].channel_names)
    batch = assemble_batch(data, [0, 1, 2, 3], SMALL, 0.5, seed, 0, 0)
    return state, AdamW(state.params), batch, cfg, ids


def test_step_gradients_match_finite_differences():
    from comet_eeg.cli import gradcheck_setup
    from comet_eeg.diffengine import grad_check
    fn, point = gradcheck_setup(0)
    assert grad_check(fn, point) < 1e-4


def test_momentum_branch_receives_no_optimizer_update():
    state, opt, batch, cfg, ids = _step_setup()
    new, report, lr, mu = pretrain_step(state, opt, batch, 0, 10, cfg, ids)
    assert set(opt.m) == set(state.params)
    expected = {k: mu * state.momentum[k] + (1 - mu) * new.params[k] for k in state.momentum}
    for k in state.momentum:
        np.testing.assert_allclose(new.momentum[k], expected[k], rtol=0, atol=1e-15)


def test_lambda_zero_contrastive_does_not_reach_online_gradients():
    state, _, batch, cfg, ids = _step_setup(lam=0.0)
    from comet_eeg import diffengine as de
    from comet_eeg.model import as_tensors, momentum_encode
    targets = momentum_encode(batch.views, batch.view_pairs, ids, state.momentum, SMALL)
    leaves = as_tensors(state.params, requires_grad=True)
    _, _, l_c, _ = tr.forward_losses(leaves, batch, ids, SMALL, targets, cfg.tau, 0.0)
    table = de.backward(l_c, wrt=leaves.values())
    assert all(not table[id(t)].any() for t in leaves.values())
    total, l_r, _, _ = tr.forward_losses(leaves, batch, ids, SMALL, targets, cfg.tau, 0.0)
    assert total is l_r


def test_non_finite_loss_aborts_step(caplog):
    state, opt, batch, cfg, ids = _step_setup()
    batch.raw[0, 0, 0] = np.nan
    before = {k: v.copy() for k, v in state.params.items()}
    with pytest.raises(NonFiniteLoss):
        pretrain_step(state, opt, batch, 0, 10, cfg, ids)
    assert all(np.array_equal(before[k], state.params[k]) for k in before)
    assert opt.t == 0
    assert "non-finite" in caplog.text


def test_batch_is_pure_function_of_ids():
    data = small_data(8)
    a = assemble_batch(data, [5, 2, 7], SMALL, 0.5, 1, 2, 3)
    b = assemble_batch(data, [2, 7], SMALL, 0.5, 1, 2, 3, workers=2)
    np.testing.assert_array_equal(a.plans[1].visible, b.plans[0].visible)
    np.testing.assert_array_equal(a.views[2], b.views[1])


def test_rejects_dataset_smaller_than_batch():
    with pytest.raises(ValueError):
        run_pretrain(small_data(3), small_config())


# --- runs -------------------------------------------------------------------

def test_runs_are_bit_identical_across_workers(tmp_path):
    data = small_data()
    _, log1 = run_pretrain(data, small_config(workers=1))
    _, log4 = run_pretrain(data, small_config(workers=4))
    assert log1.rows() == log4.rows()


def test_resume_gives_bit_identical_next_loss(tmp_path):
    data = small_data()
    cfg = small_config(epochs=3)
    _, full = run_pretrain(data, cfg)
    run_pretrain(data, cfg, out_dir=tmp_path / "a", max_steps=7)
    _, resumed = run_pretrain(data, cfg, resume=tmp_path / "a" / "last")
    assert resumed.records[0]["step"] == 7
    assert resumed.rows() == full.rows()[7:]


def test_run_writes_checkpoints_and_csv(tmp_path):
    data = small_data()
    state, log = run_pretrain(data, small_config(), out_dir=tmp_path)
    assert (tmp_path / "best" / "checkpoint.json").exists()
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,mu,L_R,L_C,total,rho_pos,rho_neg"
    assert len(lines) == len(log.records) + 1
    restored, manifest, _ = load_checkpoint(tmp_path / "last")
    assert all(np.array_equal(restored.params[k], state.params[k]) for k in state.params)
    assert log.wall_time > 0


def test_trainlog_is_append_only():
    from comet_eeg.objectives import LossReport
    log = TrainLog()
    rep = LossReport(1.0, 2.0, 3.0, 0.5, 0.1, 0.1, 1.0)
    log.append(0, 0, 1e-3, 0.996, rep)
    with pytest.raises(ValueError):
        log.append(0, 0, 1e-3, 0.996, rep)


def test_checkpoint_roundtrip_is_exact(tmp_path):
    state, opt, batch, cfg, ids = _step_setup()
    state, *_ = pretrain_step(state, opt, batch, 0, 10, cfg, ids)
    save_checkpoint(tmp_path / "ck", state, opt, step=1)
    back, manifest, (t, m, v) = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 1 and t == opt.t
    for k in state.params:
        assert np.array_equal(back.params[k], state.params[k])
        assert np.array_equal(m[k], opt.m[k]) and np.array_equal(v[k], opt.v[k])
    for k in state.momentum:
        assert np.array_equal(back.momentum[k], state.momentum[k])
