import numpy as np
import pytest

from tatk import losses
from tatk import tensor as T
from tatk.losses import LossConfig
from tatk.tensor import Tensor


def direct_mean_filter(delta, k):
    """Loop oracle: k x k mean filter with replicate padding."""
    b, c, h, w = delta.shape
    out = np.zeros_like(delta)
    r = k // 2
    for n in range(b):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    acc = 0.0
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            yy = min(max(y + dy, 0), h - 1)
                            xx = min(max(x + dx, 0), w - 1)
                            acc += delta[n, ch, yy, xx]
                    out[n, ch, y, x] = acc / (k * k)
    return out


# ---- logit loss -------------------------------------------------------------

def test_logit_loss_value():
    out = losses.logit_loss(Tensor([[2.0, -1.0, 0.5]]), np.array([0]))
    assert out.item() == -2.0


def test_logit_loss_gradient_one_hot():
    z = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    losses.logit_loss(z, np.array([1])).backward()
    assert np.array_equal(z.grad, [[0.0, -1.0, 0.0]])


def test_logit_loss_batch_gradient_scaled():
    z = Tensor(np.zeros((4, 3)), requires_grad=True)
    losses.logit_loss(z, np.array([0, 1, 2, 0])).backward()
    assert np.isclose(z.grad[0, 0], -0.25)
    assert np.count_nonzero(z.grad) == 4


def test_logit_loss_ignores_other_classes():
    base = losses.logit_loss(Tensor([[2.0, -1.0, 0.5]]), np.array([0])).item()
    bumped = losses.logit_loss(Tensor([[2.0, 9.0, 0.5]]), np.array([0])).item()
    assert base == bumped


def test_logit_loss_label_out_of_range():
    with pytest.raises(ValueError):
        losses.logit_loss(Tensor([[0.0, 1.0]]), np.array([5]))


# ---- smoothing loss ----------------------------------------------------------

def test_smoothing_loss_zero_perturbation():
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 6, 6)))
    assert losses.smoothing_loss(x, x, 3).item() == 0.0


def test_smoothing_loss_constant_delta():
    c = 0.043
    clean = Tensor(np.zeros((1, 2, 5, 5)))
    adv = Tensor(np.full((1, 2, 5, 5), c))
    # replicate padding makes every window average exactly c
    expected = c * 2 * 5 * 5
    assert abs(losses.smoothing_loss(adv, clean, 3).item() - expected) < 1e-12


def test_smoothing_loss_checkerboard_attenuated():
    c = 0.1
    yy, xx = np.mgrid[0:6, 0:6]
    checker = np.where((yy + xx) % 2 == 0, c, -c)[None, None]
    clean = Tensor(np.zeros((1, 1, 6, 6)))
    adv = Tensor(checker)
    val = losses.smoothing_loss(adv, clean, 3).item()
    oracle = np.abs(direct_mean_filter(checker, 3)).sum()
    assert abs(val - oracle) < 1e-12
    assert val < c * checker.size


def test_smoothing_loss_matches_loop_oracle_random():
    rng = np.random.default_rng(1)
    clean = rng.uniform(size=(2, 3, 7, 5))
    adv = np.clip(clean + rng.uniform(-0.1, 0.1, size=clean.shape), 0, 1)
    val = losses.smoothing_loss(Tensor(adv), Tensor(clean), 3).item()
    oracle = np.abs(direct_mean_filter(adv - clean, 3)).sum()
    assert abs(val - oracle) < 1e-10


def test_smoothing_loss_is_conv2d_composition():
    rng = np.random.default_rng(2)
    clean = Tensor(rng.uniform(size=(2, 3, 6, 6)))
    adv = Tensor(rng.uniform(size=(2, 3, 6, 6)))
    k = 3
    delta = adv - clean
    kernel = Tensor(np.full((1, 1, k, k), 1.0 / (k * k)))
    composed = (
        T.conv2d(delta.reshape((6, 1, 6, 6)), kernel, padding="replicate")
        .abs()
        .sum()
    )
    assert losses.smoothing_loss(adv, clean, k).item() == composed.item()


def test_smoothing_loss_contracts_l1():
    rng = np.random.default_rng(3)
    for _ in range(20):
        delta = rng.uniform(-1, 1, size=(1, 2, 6, 6))
        zero = Tensor(np.zeros_like(delta))
        val = losses.smoothing_loss(Tensor(delta), zero, 3).item()
        assert val <= np.abs(delta).sum() + 1e-12


def test_smoothing_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        losses.smoothing_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))), 3)


def test_even_kernel_rejected():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        losses.smoothing_loss(x, x, 2)
    with pytest.raises(ValueError):
        LossConfig(kernel_size=4)


# ---- total loss ------------------------------------------------------------------

def rand_setup(seed=4):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    labels = np.array([0, 2, 1])
    clean = rng.uniform(size=(3, 2, 6, 6))
    adv = Tensor(np.clip(clean + rng.uniform(-0.05, 0.05, size=clean.shape), 0, 1),
                 requires_grad=True)
    return logits, labels, adv, Tensor(clean)


def test_total_loss_lambda_zero_equals_logit():
    logits, labels, adv, clean = rand_setup()
    total = losses.total_loss(logits, labels, adv, clean,
                              LossConfig(smoothing_weight=0.0))
    assert total.item() == losses.logit_loss(logits, labels).item()


def test_total_loss_weighted_sum():
    # the combined objective weights the smoothing term by lambda / numel
    logits, labels, adv, clean = rand_setup()
    lam = 200.0
    total = losses.total_loss(logits, labels, adv, clean,
                              LossConfig(smoothing_weight=lam))
    expect = (losses.logit_loss(logits, labels).item()
              + lam / adv.size * losses.smoothing_loss(adv, clean, 3).item())
    assert abs(total.item() - expect) < 1e-9


def test_total_loss_gradient_linearity():
    lam = 7.5

    def grads(fn):
        logits, labels, adv, clean = rand_setup()
        fn(logits, labels, adv, clean).backward()
        return logits.grad, adv.grad, adv.size

    gl_total, ga_total, numel = grads(
        lambda z, y, a, c: losses.total_loss(z, y, a, c, LossConfig(smoothing_weight=lam))
    )
    gl_logit, _, _ = grads(lambda z, y, a, c: losses.logit_loss(z, y))
    _, ga_smooth, _ = grads(lambda z, y, a, c: losses.smoothing_loss(a, c, 3))
    assert np.abs(gl_total - gl_logit).max() < 1e-9
    assert np.abs(ga_total - lam / numel * ga_smooth).max() < 1e-9


def test_cross_entropy_baseline_uniform():
    out = losses.cross_entropy_loss(Tensor([[0.0, 0.0]]), np.array([0]))
    assert abs(out.item() - np.log(2.0)) < 1e-12


def test_cross_entropy_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = Tensor(rng.standard_normal((4, 6)) * 10)
        y = rng.integers(0, 6, size=4)
        assert losses.cross_entropy_loss(z, y).item() >= 0.0


def test_gradient_vanishing_contrast():
    """Saturated softmax kills the CE input-gradient; the logit loss keeps -1."""
    z_data = np.array([[40.0, 0.0]])
    y = np.array([0])

    z_ce = Tensor(z_data, requires_grad=True)
    losses.cross_entropy_loss(z_ce, y).backward()
    assert np.abs(z_ce.grad).max() < 1e-15

    z_logit = Tensor(z_data, requires_grad=True)
    losses.logit_loss(z_logit, y).backward()
    assert z_logit.grad[0, 0] == -1.0


def test_total_loss_cross_entropy_kind():
    logits, labels, adv, clean = rand_setup()
    total = losses.total_loss(logits, labels, adv, clean,
                              LossConfig(loss_kind="cross_entropy"))
    assert total.item() == losses.cross_entropy_loss(logits, labels).item()
