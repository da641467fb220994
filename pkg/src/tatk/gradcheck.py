"""Finite-difference verification of autodiff gradients.

Central differences (f(x+h) - f(x-h)) / 2h are compared element-wise
against the recorded backward rules. Inputs are kept away from the
non-smooth points of relu/abs so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tatk import tensor as T
from tatk.tensor import Tensor


def central_difference(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numeric gradient of a scalar-valued ``fn(ndarray)`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn(x))
        flat[i] = orig - h
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Element-wise |a-n| / max(|a|+|n|, floor), reduced to the maximum."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((np.abs(analytic - numeric) / denom).max())


@dataclass
class OpCheck:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class GradCheckReport:
    checks: list[OpCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.checks), default=0.0)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if c.passed else 'FAIL'} {c.name}: "
            f"max_rel_err={c.max_error:.3e} tol={c.tolerance:.1e}"
            for c in self.checks
        ]


def grad_check(model_fn, x: np.ndarray, tolerance: float, h: float = 1e-4,
               name: str = "model_fn") -> GradCheckReport:
    """Compare autodiff and central-difference gradients of ``model_fn``.

    ``model_fn`` maps a Tensor to a scalar Tensor. The input must be small
    enough to afford 2*numel forward evaluations.
    """
    leaf = Tensor(x, requires_grad=True)
    model_fn(leaf).backward()
    analytic = leaf.grad
    numeric = central_difference(lambda a: model_fn(Tensor(a)).item(), x, h=h)
    err = max_relative_error(analytic, numeric)
    return GradCheckReport([OpCheck(name, err, tolerance)])


def _away_from_kinks(rng: np.random.Generator, shape, margin: float = 5e-2) -> np.ndarray:
    """Random values with |x| >= margin, so relu/abs kinks stay out of reach."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def _corrupted_relu(x: Tensor) -> Tensor:
    # negative control: forward is relu, backward rule is deliberately wrong
    out = T._record(np.maximum(x.data, 0.0), (x,))
    if out._backward_fn is T._PENDING:
        def bwd(g, a=x):
            a._accumulate(g * (a.data > 0.0) * 1.25)
        out._backward_fn = bwd
    return out


def check_all_ops(seed: int = 0, corrupt: bool = False,
                  op_tolerance: float = 1e-4,
                  pipeline_tolerance: float = 1e-3) -> GradCheckReport:
    """Run the finite-difference suite over every differentiable op plus a
    conv+relu+softmax+CE chain. ``corrupt`` swaps in a broken backward rule
    so failure detection itself can be exercised."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    def check(name, fn, x, tol=op_tolerance):
        rep = grad_check(fn, x, tol, name=name)
        report.checks.extend(rep.checks)

    v = _away_from_kinks(rng, (3, 4))
    other = Tensor(rng.standard_normal((3, 4)))
    weights = Tensor(rng.standard_normal((4, 2)))
    check("add", lambda t: (t + other).sum(), v)
    check("sub", lambda t: (t - other).sum(), v)
    check("mul", lambda t: (t * other).sum(), v)
    check("neg", lambda t: (-t).sum(), v)
    check("scale_by_constant", lambda t: (t * 2.5).sum(), v)
    check("abs", lambda t: t.abs().sum(), v)
    check("relu", lambda t: t.relu().sum(), v)
    check("reshape", lambda t: (t.reshape((4, 3)) * Tensor(np.ones((4, 3)))).sum(), v)
    check("mean", lambda t: t.mean(), v)
    check("matmul", lambda t: T.matmul(t, weights).sum(), v)

    img = rng.uniform(0.1, 0.9, size=(2, 2, 6, 6))
    kern = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    check("conv2d_valid", lambda t: T.conv2d(t, kern).sum(), img)
    check("conv2d_zero_pad", lambda t: T.conv2d(t, kern, padding="zero").sum(), img)
    check("conv2d_replicate_pad",
          lambda t: T.conv2d(t, kern, padding="replicate").sum(), img)
    check("conv2d_stride2", lambda t: T.conv2d(t, kern, stride=2).sum(), img)
    kdata = rng.standard_normal((3, 2, 3, 3))
    img_t = Tensor(img)
    check("conv2d_kernel_grad", lambda t: T.conv2d(img_t, t).sum(), kdata)
    check("max_pool2d", lambda t: T.max_pool2d(t, 2).sum(),
          rng.uniform(0, 1, size=(2, 2, 6, 6)))

    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    weights_sm = Tensor(rng.standard_normal((4, 5)))
    check("softmax", lambda t: (T.softmax(t) * weights_sm).sum(), logits)
    check("cross_entropy", lambda t: T.cross_entropy(T.softmax(t), labels), logits)
    check("take_per_row", lambda t: T.take_per_row(t, labels).sum(), logits)
    bias = rng.standard_normal(5)
    feats = Tensor(rng.standard_normal((4, 5)))
    check("add_bias", lambda t: T.add_bias(feats, t).sum() * 0.5, bias)
    w_flip = Tensor(rng.uniform(size=(2, 1, 4, 4)))
    check("flip_hw", lambda t: (T.flip_hw(t, 3) * w_flip).sum(),
          rng.uniform(size=(2, 1, 4, 4)))
    check("rot90_hw", lambda t: (T.rot90_hw(t, 1) * w_flip).sum(),
          rng.uniform(size=(2, 1, 4, 4)))
    w_perm = Tensor(rng.uniform(size=(3, 1, 3, 3)))
    check("permute_rows", lambda t: (T.permute_rows(t, np.array([2, 0, 1])) * w_perm).sum(),
          rng.uniform(size=(3, 1, 3, 3)))

    tap_idx = rng.integers(0, 16, size=(2, 16, 4))
    tap_w = rng.uniform(0, 1, size=(2, 16, 4))
    w_out = Tensor(rng.uniform(size=(2, 2, 4, 4)))
    check("linear_resample",
          lambda t: (T.linear_resample(t, tap_idx, tap_w) * w_out).sum(),
          rng.uniform(size=(2, 2, 4, 4)))
    tail = Tensor(np.ones((2, 1, 3, 3)))
    check("concat_rows", lambda t: T.concat_rows([t, tail]).sum(),
          rng.uniform(size=(2, 1, 3, 3)))

    # small end-to-end chain: conv -> relu -> pool -> flatten -> softmax -> CE
    chain_kern = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.7)
    chain_labels = np.array([1, 0])

    def chain(t):
        z = T.conv2d(t, chain_kern, padding="zero").relu()
        z = T.max_pool2d(z, 2)
        z = z.reshape((2, -1))
        return T.cross_entropy(T.softmax(z), chain_labels)

    check("conv_relu_pool_softmax_ce_chain", chain,
          rng.uniform(0.1, 0.9, size=(2, 1, 6, 6)), tol=pipeline_tolerance)

    if corrupt:
        check("corrupted_relu", lambda t: _corrupted_relu(t).sum(), v)
    return report
