import math

import numpy as np
import pytest

from tatk import transforms as tr
from tatk.data import ImageBatch
from tatk.tensor import Tensor


def make_batch(b=4, c=3, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(Tensor(rng.uniform(size=(b, c, h, w))), np.arange(b) % 3)


# ---- single augmentations -----------------------------------------------------

def test_hflip_involution():
    batch = make_batch()
    op = tr.AugmentationOp("hflip")
    once = tr.apply_augmentation_ops(batch.images, [op] * 4)
    twice = tr.apply_augmentation_ops(once, [op] * 4)
    assert np.array_equal(twice.data, batch.images.data)


def test_identity_unchanged():
    batch = make_batch()
    out = tr.apply_augmentation_ops(batch.images, [tr.AugmentationOp("identity")] * 4)
    assert np.array_equal(out.data, batch.images.data)


def test_quarter_rotation_four_times_identity():
    batch = make_batch()
    op = tr.AugmentationOp("rotate", ("quarter", 1))
    x = batch.images
    for _ in range(4):
        x = tr.apply_augmentation_ops(x, [op] * 4)
    assert np.abs(x.data - batch.images.data).max() < 1e-9


def test_vflip_matches_numpy():
    batch = make_batch()
    out = tr.apply_augmentation_ops(batch.images, [tr.AugmentationOp("vflip")] * 4)
    assert np.array_equal(out.data, batch.images.data[:, :, ::-1, :])


def test_erasing_zeroes_rectangle_only():
    batch = make_batch(b=1, h=10, w=10)
    op = tr.AugmentationOp("erasing", (0.3, 0.3, 0.0, 0.0))
    out = tr.apply_augmentation_ops(batch.images, [op]).data
    assert np.array_equal(out[0, :, :3, :3], np.zeros((3, 3, 3)))
    assert np.array_equal(out[0, :, 3:, :], batch.images.data[0, :, 3:, :])


def test_augmentations_preserve_shape_and_range():
    rng = np.random.default_rng(5)
    batch = make_batch(b=2, h=12, w=12, seed=1)
    for _ in range(50):
        op = tr.sample_augmentation(rng)
        out = tr.apply_augmentation_ops(batch.images, [op, op])
        assert out.shape == batch.images.shape, op
        assert out.data.min() >= -1e-12 and out.data.max() <= 1 + 1e-12, op


def test_apply_augmentation_keeps_labels():
    batch = make_batch()
    out = tr.apply_augmentation(batch, np.random.default_rng(3))
    assert np.array_equal(out.labels, batch.labels)


# ---- shuffle --------------------------------------------------------------------

def test_shuffle_single_image_is_identity():
    batch = make_batch(b=1)
    out = tr.shuffle_batch(batch, np.random.default_rng(0))
    assert np.array_equal(out.images.data, batch.images.data)
    assert np.array_equal(out.labels, batch.labels)


def test_shuffle_preserves_multiset():
    batch = make_batch(b=8)
    out = tr.shuffle_batch(batch, np.random.default_rng(1))
    key = lambda imgs: sorted(map(tuple, imgs.reshape(8, -1).round(12).tolist()))
    assert key(out.images.data) == key(batch.images.data)
    assert sorted(out.labels) == sorted(batch.labels)


def test_shuffle_uniform_over_permutations():
    batch = make_batch(b=3)
    rng = np.random.default_rng(2)
    counts = {}
    n = 10_000
    for _ in range(n):
        perm = tuple(rng.permutation(3))
        counts[perm] = counts.get(perm, 0) + 1
    assert len(counts) == 6
    for freq in counts.values():
        assert abs(freq / n - 1 / 6) < 0.02


# ---- rectangle masks ---------------------------------------------------------------

def test_full_fraction_gives_full_mask():
    rect = tr.sample_rect_mask(8, 10, (1.0, 1.0), np.random.default_rng(0))
    assert (rect.top, rect.left, rect.height, rect.width) == (0, 0, 8, 10)
    assert tr.RectMask(0, 0, 8, 10).to_array(8, 10).sum() == 80


def test_mask_sum_equals_area():
    rng = np.random.default_rng(1)
    for _ in range(100):
        rect = tr.sample_rect_mask(16, 12, (0.2, 0.6), rng)
        arr = rect.to_array(16, 12)
        assert arr.sum() == rect.height * rect.width
        assert set(np.unique(arr)) <= {0.0, 1.0}


def test_mean_area_matches_simulation_oracle():
    h = w = 32
    lo, hi = 0.2, 0.6
    rng = np.random.default_rng(7)

    # independent oracle: simulate the rounding scheme directly
    sim = np.random.default_rng(12345)
    def draw_side(n):
        return np.minimum(n, np.maximum(1, np.round(sim.uniform(lo, hi, size=200_000) * n)))
    expected_area = draw_side(h).mean() * draw_side(w).mean()

    areas = [
        (r := tr.sample_rect_mask(h, w, (lo, hi), rng)).height * r.width
        for _ in range(10_000)
    ]
    assert abs(np.mean(areas) - expected_area) / expected_area < 0.05


# ---- local mix ------------------------------------------------------------------------

def brute_force_local_mix(s1, s2, masks, eta):
    """Plain loop oracle for the mixing formula."""
    out = s1.copy()
    b, c, h, w = s1.shape
    for n in range(b):
        m = masks[n]
        for y in range(m.top, m.top + m.height):
            for x in range(m.left, m.left + m.width):
                for ch in range(c):
                    out[n, ch, y, x] = eta * s1[n, ch, y, x] + (1 - eta) * s2[n, ch, y, x]
    return out


def test_local_mix_outside_mask_bitwise_s1():
    b1, b2 = make_batch(seed=1), make_batch(seed=2)
    masks = [tr.RectMask(2, 2, 3, 3)] * 4
    out = tr.local_mix(b1, b2, masks, eta=0.5)
    outside = np.ones((8, 8), dtype=bool)
    outside[2:5, 2:5] = False
    assert np.array_equal(out.images.data[:, :, outside], b1.images.data[:, :, outside])
    assert np.array_equal(out.labels, b1.labels)


def test_local_mix_eta_near_one_is_s1():
    b1, b2 = make_batch(seed=1), make_batch(seed=2)
    masks = [tr.RectMask(0, 0, 8, 8)] * 4
    out = tr.local_mix(b1, b2, masks, eta=1.0 - 1e-12)
    assert np.abs(out.images.data - b1.images.data).max() < 1e-11


def test_local_mix_pointwise_value():
    s1 = ImageBatch(Tensor(np.full((1, 1, 2, 2), 0.2)), np.array([0]))
    s2 = ImageBatch(Tensor(np.full((1, 1, 2, 2), 0.6)), np.array([1]))
    out = tr.local_mix(s1, s2, [tr.RectMask(0, 0, 2, 2)], eta=0.5)
    assert np.abs(out.images.data - 0.4).max() < 1e-15
    assert out.labels[0] == 0


def test_local_mix_matches_brute_force():
    rng = np.random.default_rng(3)
    b1, b2 = make_batch(seed=3), make_batch(seed=4)
    masks = [tr.sample_rect_mask(8, 8, (0.2, 0.8), rng) for _ in range(4)]
    out = tr.local_mix(b1, b2, masks, eta=0.37)
    oracle = brute_force_local_mix(b1.images.data, b2.images.data, masks, 0.37)
    assert np.abs(out.images.data - oracle).max() < 1e-10


def test_local_mix_stays_in_unit_interval():
    rng = np.random.default_rng(6)
    for _ in range(20):
        b1, b2 = make_batch(seed=rng.integers(99)), make_batch(seed=rng.integers(99))
        masks = [tr.sample_rect_mask(8, 8, (0.2, 1.0), rng) for _ in range(4)]
        out = tr.local_mix(b1, b2, masks, eta=float(rng.uniform(0.05, 0.95)))
        assert out.images.data.min() >= 0.0 and out.images.data.max() <= 1.0


def test_local_mix_gradient_is_linear_map():
    rng = np.random.default_rng(8)
    masks = [tr.RectMask(1, 1, 4, 4)] * 2
    w = rng.uniform(size=(2, 3, 8, 8))
    s2_data = rng.uniform(size=(2, 3, 8, 8))

    def loss_of(x):
        s1 = ImageBatch(Tensor(x) if not isinstance(x, Tensor) else x, np.zeros(2, dtype=int))
        s2 = ImageBatch(Tensor(s2_data), np.zeros(2, dtype=int))
        return (tr.local_mix(s1, s2, masks, 0.3).images * Tensor(w)).sum()

    x = rng.uniform(size=(2, 3, 8, 8))
    xt = Tensor(x, requires_grad=True)
    loss_of(xt).backward()

    h = 1e-6
    for flat_i in [0, 100, 311]:
        e = np.zeros_like(x)
        e.reshape(-1)[flat_i] = h
        fd = (loss_of(x + e).item() - loss_of(x - e).item()) / (2 * h)
        assert abs(fd - xt.grad.reshape(-1)[flat_i]) < 1e-6


def test_local_mix_shape_mismatch():
    b1 = make_batch(b=2)
    b2 = make_batch(b=3)
    with pytest.raises(Exception):
        tr.local_mix(b1, b2, [tr.RectMask(0, 0, 2, 2)] * 2, 0.5)


# ---- rounds ------------------------------------------------------------------------------

def test_round_with_near_one_eta_and_no_aug_is_identityish():
    batch = make_batch()
    cfg = tr.MixRoundConfig(eta=0.999999, augmentation_enabled=False)
    out = tr.build_transformed_round(batch, cfg, np.random.default_rng(0))
    assert np.abs(out.images.data - batch.images.data).max() < 1e-5


def test_round_labels_equal_input_labels():
    batch = make_batch()
    for seed in range(5):
        out = tr.build_transformed_round(batch, tr.MixRoundConfig(), np.random.default_rng(seed))
        assert np.array_equal(out.labels, batch.labels)


def test_round_deterministic_given_seed():
    batch = make_batch()
    a = tr.build_transformed_round(batch, tr.MixRoundConfig(), np.random.default_rng(11))
    b = tr.build_transformed_round(batch, tr.MixRoundConfig(), np.random.default_rng(11))
    assert np.array_equal(a.images.data, b.images.data)


def test_m_rounds_count_and_distinctness():
    batch = make_batch()
    single = tr.build_m_rounds(batch, tr.MixRoundConfig(), 1, np.random.default_rng(0))
    assert len(single) == 1
    rounds = tr.build_m_rounds(batch, tr.MixRoundConfig(), 8, np.random.default_rng(1))
    assert len(rounds) == 8
    distinct = 0
    for i in range(len(rounds)):
        for j in range(i + 1, len(rounds)):
            if not np.array_equal(rounds[i].images.data, rounds[j].images.data):
                distinct += 1
    assert distinct == 8 * 7 // 2


def test_m_rounds_plans_replay_exactly():
    batch = make_batch()
    cfg = tr.MixRoundConfig()
    plans = tr.sample_m_round_plans(4, 8, 8, cfg, 3, np.random.default_rng(5))
    a = [tr.apply_round_plan(batch, p).images.data for p in plans]
    b = [tr.apply_round_plan(batch, p).images.data for p in plans]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_mix_round_config_validation():
    with pytest.raises(ValueError):
        tr.MixRoundConfig(eta=0.0)
    with pytest.raises(ValueError):
        tr.MixRoundConfig(rect_fraction_range=(0.0, 0.5))
    with pytest.raises(ValueError):
        tr.MixRoundConfig(rect_fraction_range=(0.7, 0.5))
