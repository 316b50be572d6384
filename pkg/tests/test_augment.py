import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comet_eeg.augment import make_pairs, mirror_sets, upsample2x, upsampled_visibility, window_views
from comet_eeg.model import MaskPlan, n_visible, sample_mask
from comet_eeg.signals import EegSample


def brute_force_visibility(mirror, n_patches):
    """1-based upsampled patch j uses original step ceil(j/2)."""
    rows = []
    for j in range(1, 2 * n_patches + 1):
        rows.append(mirror.visible[math.ceil(j / 2) - 1])
    return np.array(rows)


def test_mirror_is_complement():
    plan = MaskPlan(np.array([[0, 1], [2, 3]]), 4)
    assert mirror_sets(plan).visible.tolist() == [[2, 3], [0, 1]]


def test_mirror_of_three_channels():
    plan = sample_mask(3, 5, 0.5, np.random.default_rng(0))
    assert plan.n_visible == 2 and mirror_sets(plan).n_visible == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(1, 12), st.integers(0, 2**31))
def test_mirror_partition(C, N, seed):
    plan = sample_mask(C, N, 0.5, np.random.default_rng(seed))
    mirror = mirror_sets(plan)
    for j in range(N):
        assert sorted(np.concatenate([plan.visible[j], mirror.visible[j]])) == list(range(C))


def test_upsample_keeps_originals_and_interpolates():
    x = np.array([[0.0, 2.0, 4.0, 10.0]])
    out = upsample2x(x)
    assert out.tolist() == [[0.0, 1.0, 2.0, 3.0, 4.0, 7.0, 10.0, 13.0]]


def test_upsample_ramp_exact():
    ramp = np.arange(6.0)[None]
    np.testing.assert_allclose(upsample2x(ramp)[0], np.arange(12) / 2.0, atol=1e-15)


def test_upsample_sample_doubles_rate():
    s = EegSample(np.zeros((2, 10)), ("a", "b"), 200.0)
    out = upsample2x(s)
    assert out.fs == 400.0 and out.n_times == 20


@pytest.mark.parametrize("N", [4, 16, 32])
def test_window_views_count_and_index_map(N):
    C, l = 6, 3
    rng = np.random.default_rng(N)
    mirror = mirror_sets(sample_mask(C, N, 0.5, rng))
    up = upsample2x(rng.standard_normal((C, N * l)))
    group = window_views(up, mirror, N, l)
    assert len(group) == N + 1
    per_patch = brute_force_visibility(mirror, N)
    np.testing.assert_array_equal(upsampled_visibility(mirror), per_patch)
    for k in range(N + 1):
        assert group.view(k).shape == (C, N * l)
        np.testing.assert_array_equal(group.view(k), up[:, k * l:(k + N) * l])
        for pos in range(N):
            np.testing.assert_array_equal(group.visible[k][pos], per_patch[k + pos])
        pairs = group.view_pairs(k)
        assert len(pairs) == N * mirror.n_visible


def test_window_views_rejects_wrong_length():
    mirror = mirror_sets(sample_mask(4, 4, 0.5, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        window_views(np.zeros((4, 30)), mirror, 4, 5)


def test_make_pairs():
    pos, neg = make_pairs(4)
    assert pos.tolist() == [0, 1, 2, 3]
    assert neg.shape == (4, 3) and all(i not in neg[i] for i in range(4))
    with pytest.raises(ValueError):
        make_pairs(1)
