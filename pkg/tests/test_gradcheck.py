import numpy as np

from tatk import tensor as T
from tatk.gradcheck import check_all_ops, grad_check, max_relative_error
from tatk.tensor import Tensor


def test_linear_layer_passes():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((6, 3)))
    rep = grad_check(lambda t: T.matmul(t, w).sum(), rng.standard_normal((2, 6)),
                     tolerance=1e-4)
    assert rep.passed
    assert rep.max_error < 1e-4


def test_conv_chain_passes():
    rng = np.random.default_rng(1)
    k = Tensor(rng.standard_normal((2, 1, 3, 3)))
    labels = np.array([0, 1])

    def chain(t):
        z = T.conv2d(t, k, padding="zero").relu()
        z = z.reshape((2, -1))
        return T.cross_entropy(T.softmax(z), labels)

    rep = grad_check(chain, rng.uniform(0.2, 0.8, size=(2, 1, 4, 4)), tolerance=1e-3)
    assert rep.passed


def test_corrupted_backward_fails():
    rep = check_all_ops(seed=0, corrupt=True)
    broken = [c for c in rep.checks if c.name == "corrupted_relu"]
    assert len(broken) == 1
    assert not broken[0].passed
    assert broken[0].max_error > broken[0].tolerance


def test_full_suite_passes_and_covers_every_op_once():
    rep = check_all_ops(seed=0)
    assert rep.passed
    names = [c.name for c in rep.checks]
    assert len(names) == len(set(names))
    for required in ("add", "sub", "mul", "neg", "abs", "relu", "matmul",
                     "conv2d_valid", "conv2d_replicate_pad", "max_pool2d",
                     "softmax", "cross_entropy", "linear_resample",
                     "conv_relu_pool_softmax_ce_chain"):
        assert required in names


def test_max_relative_error_handles_zero_grads():
    assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert max_relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8
