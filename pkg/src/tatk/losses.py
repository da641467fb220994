"""Attack objectives: true-class logit suppression plus perturbation smoothing.

The main loss drives the true class's logit down directly, sidestepping
softmax saturation (a saturated softmax makes cross-entropy input-gradients
vanish, while the logit loss keeps a constant -1/b per selected entry).
A low-pass term rewards routing perturbation energy into low frequencies:
the L1 norm of the mean-filtered perturbation, weighted by a scalar.
Cross-entropy is kept as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tatk import tensor as T
from tatk.tensor import Tensor

LOSS_KINDS = ("logit_smooth", "logit_only", "cross_entropy")


@dataclass(frozen=True)
class LossConfig:
    smoothing_weight: float = 200.0
    kernel_size: int = 3
    loss_kind: str = "logit_smooth"

    def __post_init__(self):
        if self.smoothing_weight < 0:
            raise ValueError(f"smoothing weight must be >= 0, got {self.smoothing_weight}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


def logit_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -z_y.

    The gradient w.r.t. the true-class logit is exactly -1/b and zero
    elsewhere, regardless of how saturated the row is.
    """
    picked = T.take_per_row(logits, labels)
    return -picked.mean()


def mean_filter(x: Tensor, k: int) -> Tensor:
    """Per-channel k-by-k mean convolution with replicate padding, same size."""
    b, c, h, w = x.shape
    kernel = Tensor(np.full((1, 1, k, k), 1.0 / (k * k)))
    flat = x.reshape((b * c, 1, h, w))
    out = T.conv2d(flat, kernel, stride=1, padding="replicate")
    return out.reshape((b, c, h, w))


def smoothing_loss(x_adv: Tensor, x_clean: Tensor, k: int) -> Tensor:
    """L1 norm of the mean-filtered perturbation x_adv - x_clean."""
    if x_adv.shape != x_clean.shape:
        raise T.ShapeError(
            f"smoothing_loss shapes differ: {x_adv.shape} vs {x_clean.shape}"
        )
    if k < 1 or k % 2 == 0:
        raise ValueError(f"mean filter size must be odd and >= 1, got {k}")
    delta = x_adv - x_clean
    return mean_filter(delta, k).abs().sum()


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Standard mean cross-entropy with max-stabilized softmax (baseline)."""
    return T.cross_entropy(T.softmax(logits), labels)


def total_loss(logits: Tensor, labels: np.ndarray, x_adv: Tensor, x_clean: Tensor,
               config: LossConfig) -> Tensor:
    """The objective the attack ascends, per the configured kind.

    The smoothing term enters as its per-element mean. With the raw sum its
    per-coordinate gradient is order smoothing_weight, which at the default
    weight of 200 swamps the logit gradient under sign updates and stalls
    the attack; dividing by the perturbation's element count keeps the two
    terms at comparable gradient scale across image and batch sizes.
    """
    if config.loss_kind == "cross_entropy":
        return cross_entropy_loss(logits, labels)
    loss = logit_loss(logits, labels)
    if config.loss_kind == "logit_smooth" and config.smoothing_weight > 0:
        scale = config.smoothing_weight / x_adv.size
        loss = loss + smoothing_loss(x_adv, x_clean, config.kernel_size) * scale
    return loss
