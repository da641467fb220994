"""Iterative adversarial-example generation with momentum.

Each iteration builds M independently transformed views of the current
adversarial batch, averages the gradient of the composite loss across
them, folds the average into an L1-normalized momentum accumulator, takes
a fixed-size sign step, and projects back into the intersection of the
epsilon ball around the clean images and the [0,1] pixel domain.

Degenerate configurations reproduce the classic baselines: no mixing with
a single round and cross-entropy loss is the standard iterative attack,
and the same with momentum enabled is the momentum iterative method.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from tatk import losses as L
from tatk import transforms as tr
from tatk.data import ImageBatch
from tatk.nn import Model, predict
from tatk.tensor import Tensor

MIX_STRATEGIES = ("local_mix", "global_admix", "no_mix")
VARIANTS = ("ours", "pgd", "mim")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0 / 255.0
    alpha: float = 1.0 / 255.0
    iterations: int = 30
    rounds: int = 25
    mix: tr.MixRoundConfig = field(default_factory=tr.MixRoundConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    mix_strategy: str = "local_mix"
    use_momentum: bool = True
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0,1] pixel units, got {self.epsilon}")
        if not 0.0 < self.alpha <= self.epsilon:
            raise ValueError(f"alpha must satisfy 0 < alpha <= epsilon, got {self.alpha}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.mix_strategy not in MIX_STRATEGIES:
            raise ValueError(
                f"mix_strategy must be one of {MIX_STRATEGIES}, got {self.mix_strategy!r}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def variant_config(name: str, base: AttackConfig) -> AttackConfig:
    """Map a named baseline onto a degenerate configuration of the attack."""
    if name == "ours":
        return base
    if name == "pgd":
        return replace(base, mix_strategy="no_mix", rounds=1, use_momentum=False,
                       loss=replace(base.loss, loss_kind="cross_entropy"))
    if name == "mim":
        return replace(base, mix_strategy="no_mix", rounds=1, use_momentum=True,
                       loss=replace(base.loss, loss_kind="cross_entropy"))
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")


@dataclass
class AttackState:
    step: int
    momentum: np.ndarray
    x_adv: np.ndarray


@dataclass
class StepTrace:
    step: int
    loss: float
    grad_l1: float

    def line(self) -> str:
        return f"step={self.step} loss={self.loss:.17g} grad_l1={self.grad_l1:.17g}"


@dataclass
class AttackResult:
    adversarial: ImageBatch
    success: np.ndarray
    trace: list[StepTrace]


def _round_plans(shape, config: AttackConfig, rng: np.random.Generator):
    """Per-strategy plans for one iteration's M rounds."""
    b, _, h, w = shape
    if config.mix_strategy == "no_mix":
        return [None] * config.rounds
    mix = config.mix
    if config.mix_strategy == "global_admix":
        mix = replace(mix, rect_fraction_range=(1.0, 1.0))
    return tr.sample_m_round_plans(b, h, w, mix, config.rounds, rng)


def averaged_gradient(model: Model, x_adv: np.ndarray, labels: np.ndarray,
                      x_clean: np.ndarray, config: AttackConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Mean over M transformed rounds of the total-loss gradient at x_adv.

    Rounds are evaluated and summed in ascending index order, so the result
    is deterministic. Returns the gradient and the mean per-round loss.
    """
    plans = _round_plans(x_adv.shape, config, rng)
    grad_sum = np.zeros_like(x_adv)
    loss_sum = 0.0
    for plan in plans:
        leaf = Tensor(x_adv, requires_grad=True)
        batch = ImageBatch(leaf, labels)
        transformed = batch if plan is None else tr.apply_round_plan(batch, plan)
        logits = model.forward_logits(transformed.images)
        loss = L.total_loss(logits, transformed.labels, leaf, Tensor(x_clean), config.loss)
        loss.backward()
        if not np.isfinite(leaf.grad).all():
            raise FloatingPointError("non-finite gradient during attack iteration")
        grad_sum += leaf.grad
        loss_sum += loss.item()
    m = len(plans)
    return grad_sum / m, loss_sum / m


def momentum_update(g: np.ndarray, g_bar: np.ndarray) -> np.ndarray:
    """Accumulate the L1-normalized average gradient into the momentum term.

    The norm is taken over the whole batch tensor. A zero-norm average adds
    nothing (with a warning) instead of dividing by zero.
    """
    norm = np.abs(g_bar).sum()
    if norm == 0.0:
        warnings.warn("zero-norm averaged gradient; momentum unchanged", RuntimeWarning)
        return g.copy()
    return g + g_bar / norm


def step_and_clip(x_adv: np.ndarray, g: np.ndarray, x_clean: np.ndarray,
                  alpha: float, epsilon: float) -> np.ndarray:
    """Signed step then projection onto the epsilon ball intersected with [0,1]."""
    candidate = x_adv + alpha * np.sign(g)
    lo = np.maximum(x_clean - epsilon, 0.0)
    hi = np.minimum(x_clean + epsilon, 1.0)
    return np.clip(candidate, lo, hi)


def _check_state(x_adv: np.ndarray, x_clean: np.ndarray, epsilon: float) -> None:
    gap = np.abs(x_adv - x_clean).max()
    if gap > epsilon + 1e-9:
        raise AssertionError(f"epsilon constraint violated: {gap} > {epsilon}")
    if x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise AssertionError("adversarial pixels left the [0,1] domain")


def run_attack(model: Model, clean_batch: ImageBatch, config: AttackConfig,
               state_hook=None) -> AttackResult:
    """Generate adversarial examples for one batch.

    Deterministic given (model, batch, config.seed). ``state_hook``, when
    given, receives the AttackState after every iteration (used by the
    in-loop invariant checks in tests).
    """
    x_clean = clean_batch.images.data.copy()
    labels = clean_batch.labels.copy()
    x_adv = x_clean.copy()
    g = np.zeros_like(x_adv)
    trace: list[StepTrace] = []
    for t in range(config.iterations):
        # one child stream per iteration keyed on (seed, t): replayable and
        # independent of any other iteration's draws
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, t]))
        g_bar, mean_loss = averaged_gradient(model, x_adv, labels, x_clean, config, rng)
        if config.use_momentum:
            g = momentum_update(g, g_bar)
        else:
            g = g_bar
        x_adv = step_and_clip(x_adv, g, x_clean, config.alpha, config.epsilon)
        _check_state(x_adv, x_clean, config.epsilon)
        trace.append(StepTrace(t, mean_loss, float(np.abs(g_bar).sum())))
        if state_hook is not None:
            state_hook(AttackState(t, g.copy(), x_adv.copy()))
    adversarial = ImageBatch(Tensor(x_adv), labels)
    success = predict(model, adversarial.images) != labels
    return AttackResult(adversarial, success, trace)
