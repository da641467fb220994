"""Local-mixing input transformation pipeline.

One round: every image gets a single randomly chosen augmentation, the
augmented batch is duplicated and shuffled, and a random rectangle of each
image is blended with its shuffled counterpart while everything outside the
rectangle stays untouched. Rounds are described by pure-data plans sampled
from an explicit random stream, then applied as differentiable tensor ops,
so the same plan can be replayed exactly (frozen-rng gradient checks,
deterministic parallelism).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from tatk import tensor as T
from tatk.data import ImageBatch
from tatk.tensor import Tensor

AUGMENTATION_KINDS = ("identity", "hflip", "vflip", "rotate", "affine", "resize_pad", "erasing")

QUARTER_TURNS = (90, 180, 270)
SMALL_ANGLE_RANGE = (-15.0, 15.0)
AFFINE_SHIFT_RANGE = (-0.10, 0.10)
AFFINE_SCALE_RANGE = (0.90, 1.10)
RESIZE_SCALE_RANGE = (0.75, 1.0)
ERASE_FRACTION_RANGE = (0.1, 0.3)


@dataclass(frozen=True)
class AugmentationOp:
    """One sampled augmentation: a kind plus its drawn parameters."""

    kind: str
    params: tuple = ()


@dataclass(frozen=True)
class RectMask:
    top: int
    left: int
    height: int
    width: int

    def to_array(self, h: int, w: int) -> np.ndarray:
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise ValueError(f"rectangle {self} exceeds image bounds {(h, w)}")
        mask = np.zeros((h, w))
        mask[self.top : self.top + self.height, self.left : self.left + self.width] = 1.0
        return mask


@dataclass(frozen=True)
class MixRoundConfig:
    eta: float = 0.5
    rect_fraction_range: tuple[float, float] = (0.2, 0.6)
    augmentation_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must be in (0,1), got {self.eta}")
        lo, hi = self.rect_fraction_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"invalid rect fraction range {self.rect_fraction_range}")


@dataclass
class RoundPlan:
    """Everything random about one transformation round, frozen as data."""

    augmentations: list[AugmentationOp]
    permutation: np.ndarray
    masks: list[RectMask]
    eta: float


# ---- augmentation sampling ---------------------------------------------------


def sample_augmentation(rng: np.random.Generator) -> AugmentationOp:
    """Uniformly choose one augmentation kind and draw its parameters."""
    kind = AUGMENTATION_KINDS[int(rng.integers(len(AUGMENTATION_KINDS)))]
    if kind == "rotate":
        # exact quarter turns half the time, bilinear small angles otherwise
        if rng.random() < 0.5:
            return AugmentationOp(kind, ("quarter", int(rng.integers(1, 4))))
        return AugmentationOp(kind, ("small", float(rng.uniform(*SMALL_ANGLE_RANGE))))
    if kind == "affine":
        return AugmentationOp(kind, (
            float(rng.uniform(*AFFINE_SHIFT_RANGE)),
            float(rng.uniform(*AFFINE_SHIFT_RANGE)),
            float(rng.uniform(*AFFINE_SCALE_RANGE)),
        ))
    if kind == "resize_pad":
        return AugmentationOp(kind, (float(rng.uniform(*RESIZE_SCALE_RANGE)), float(rng.random()), float(rng.random())))
    if kind == "erasing":
        return AugmentationOp(kind, (
            float(rng.uniform(*ERASE_FRACTION_RANGE)),
            float(rng.uniform(*ERASE_FRACTION_RANGE)),
            float(rng.random()),
            float(rng.random()),
        ))
    return AugmentationOp(kind)


# ---- tap tables: every geometric augmentation as one sparse linear map --------


def _identity_taps(h: int, w: int):
    idx = np.arange(h * w)[:, None]
    return np.pad(idx, ((0, 0), (0, 3))), np.pad(np.ones((h * w, 1)), ((0, 0), (0, 3)))


def _index_map_taps(src_rows: np.ndarray, src_cols: np.ndarray, w: int):
    """Single-tap table for a pure index permutation map."""
    idx = (src_rows * w + src_cols).reshape(-1, 1)
    taps = np.pad(idx, ((0, 0), (0, 3)))
    weights = np.pad(np.ones((idx.shape[0], 1)), ((0, 0), (0, 3)))
    return taps, weights


def _bilinear_taps(src_y: np.ndarray, src_x: np.ndarray, h: int, w: int,
                   valid: np.ndarray | None = None):
    """Four-tap bilinear table; invalid output pixels get all-zero weights."""
    sy = np.clip(src_y, 0.0, h - 1.0)
    sx = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    dy = sy - y0
    dx = sx - x0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - dy) * (1 - dx), (1 - dy) * dx, dy * (1 - dx), dy * dx], axis=-1)
    if valid is not None:
        wts = wts * valid[..., None]
    return idx.reshape(-1, 4), wts.reshape(-1, 4)


def augmentation_taps(op: AugmentationOp, h: int, w: int):
    """Tap table realizing ``op`` on an h-by-w plane."""
    yy, xx = np.mgrid[0:h, 0:w]
    if op.kind == "identity":
        return _identity_taps(h, w)
    if op.kind == "hflip":
        return _index_map_taps(yy, w - 1 - xx, w)
    if op.kind == "vflip":
        return _index_map_taps(h - 1 - yy, xx, w)
    if op.kind == "rotate":
        mode, value = op.params
        if mode == "quarter":
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            u, v = yy - cy, xx - cx
            for _ in range(value):
                u, v = -v, u  # rotate source grid 90 degrees
            return _index_map_taps(np.rint(u + cy).astype(np.int64),
                                   np.rint(v + cx).astype(np.int64), w)
        angle = np.deg2rad(value)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        u, v = yy - cy, xx - cx
        src_y = cy + u * np.cos(angle) + v * np.sin(angle)
        src_x = cx - u * np.sin(angle) + v * np.cos(angle)
        return _bilinear_taps(src_y, src_x, h, w)
    if op.kind == "affine":
        ty, tx, scale = op.params
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        src_y = cy + (yy - cy) / scale - ty * h
        src_x = cx + (xx - cx) / scale - tx * w
        return _bilinear_taps(src_y, src_x, h, w)
    if op.kind == "resize_pad":
        scale, fy, fx = op.params
        nh = max(2, int(round(scale * h)))
        nw = max(2, int(round(scale * w)))
        top = int(round(fy * (h - nh)))
        left = int(round(fx * (w - nw)))
        inside = (yy >= top) & (yy < top + nh) & (xx >= left) & (xx < left + nw)
        # map the placed rectangle back onto the full source plane
        sy = (yy - top) * (h - 1) / max(nh - 1, 1)
        sx = (xx - left) * (w - 1) / max(nw - 1, 1)
        return _bilinear_taps(sy, sx, h, w, valid=inside.astype(float))
    if op.kind == "erasing":
        frac_h, frac_w, fy, fx = op.params
        eh = max(1, int(round(frac_h * h)))
        ew = max(1, int(round(frac_w * w)))
        top = int(round(fy * (h - eh)))
        left = int(round(fx * (w - ew)))
        keep = np.ones((h, w))
        keep[top : top + eh, left : left + ew] = 0.0
        idx, wts = _identity_taps(h, w)
        return idx, wts * keep.reshape(-1, 1)
    raise ValueError(f"unknown augmentation kind {op.kind!r}")


def apply_augmentation_ops(images: Tensor, ops: list[AugmentationOp]) -> Tensor:
    """Apply one augmentation per image, batched through linear_resample."""
    b, _, h, w = images.shape
    if len(ops) != b:
        raise ValueError(f"{len(ops)} augmentations for batch of {b}")
    tap_idx = np.empty((b, h * w, 4), dtype=np.int64)
    tap_w = np.empty((b, h * w, 4))
    for i, op in enumerate(ops):
        tap_idx[i], tap_w[i] = augmentation_taps(op, h, w)
    return T.linear_resample(images, tap_idx, tap_w)


def apply_augmentation(batch: ImageBatch, rng: np.random.Generator) -> ImageBatch:
    """Each image independently receives one random augmentation; labels keep."""
    ops = [sample_augmentation(rng) for _ in range(len(batch))]
    return ImageBatch(apply_augmentation_ops(batch.images, ops), batch.labels.copy())


def shuffle_batch(batch: ImageBatch, rng: np.random.Generator) -> ImageBatch:
    """Permute images and labels together by one uniform permutation."""
    perm = rng.permutation(len(batch))
    return ImageBatch(T.permute_rows(batch.images, perm), batch.labels[perm])


def sample_rect_mask(h: int, w: int, fraction_range: tuple[float, float],
                     rng: np.random.Generator) -> RectMask:
    """Rectangle with per-dimension size uniform in fraction_range of the
    image, placed uniformly among valid positions."""
    if h < 2 or w < 2:
        raise ValueError(f"image too small for rectangle sampling: {(h, w)}")
    lo, hi = fraction_range
    height = min(h, max(1, int(round(rng.uniform(lo, hi) * h))))
    width = min(w, max(1, int(round(rng.uniform(lo, hi) * w))))
    top = int(rng.integers(0, h - height + 1))
    left = int(rng.integers(0, w - width + 1))
    return RectMask(top, left, height, width)


def local_mix(s1: ImageBatch, s2: ImageBatch, masks: list[RectMask], eta: float) -> ImageBatch:
    """Blend eta*s1 + (1-eta)*s2 inside each rectangle; outside stays s1.

    Outside-mask pixels are bitwise s1's, and the mixed image keeps s1's
    labels (the base image dominates the scene).
    """
    if s1.images.shape != s2.images.shape:
        raise T.ShapeError(
            f"local_mix shapes differ: {s1.images.shape} vs {s2.images.shape}"
        )
    b, c, h, w = s1.images.shape
    if len(masks) != b:
        raise ValueError(f"{len(masks)} masks for batch of {b}")
    mask = np.stack([m.to_array(h, w) for m in masks])[:, None, :, :]
    mask = np.broadcast_to(mask, (b, c, h, w)).copy()
    m = Tensor(mask)
    inv = Tensor(1.0 - mask)
    mixed = m * (s1.images * eta + s2.images * (1.0 - eta)) + inv * s1.images
    return ImageBatch(mixed, s1.labels.copy())


# ---- round assembly -----------------------------------------------------------


def sample_round_plan(batch_size: int, h: int, w: int, config: MixRoundConfig,
                      rng: np.random.Generator) -> RoundPlan:
    if config.augmentation_enabled:
        augs = [sample_augmentation(rng) for _ in range(batch_size)]
    else:
        augs = [AugmentationOp("identity") for _ in range(batch_size)]
    perm = rng.permutation(batch_size)
    masks = [sample_rect_mask(h, w, config.rect_fraction_range, rng)
             for _ in range(batch_size)]
    return RoundPlan(augs, perm, masks, config.eta)


def apply_round_plan(batch: ImageBatch, plan: RoundPlan) -> ImageBatch:
    s1 = ImageBatch(apply_augmentation_ops(batch.images, plan.augmentations),
                    batch.labels.copy())
    s2 = ImageBatch(T.permute_rows(s1.images, plan.permutation),
                    s1.labels[plan.permutation])
    return local_mix(s1, s2, plan.masks, plan.eta)


def build_transformed_round(batch: ImageBatch, config: MixRoundConfig,
                            rng: np.random.Generator) -> ImageBatch:
    """One full round: augment, duplicate+shuffle, mix a random rectangle."""
    b = len(batch)
    h, w = batch.images.shape[2], batch.images.shape[3]
    return apply_round_plan(batch, sample_round_plan(b, h, w, config, rng))


def sample_m_round_plans(batch_size: int, h: int, w: int, config: MixRoundConfig,
                         m_rounds: int, rng: np.random.Generator) -> list[RoundPlan]:
    """M independent round plans, each drawn from its own child stream so
    results are independent of how rounds are later scheduled."""
    if m_rounds < 1:
        raise ValueError(f"need at least one round, got {m_rounds}")
    streams = rng.spawn(m_rounds)
    return [sample_round_plan(batch_size, h, w, config, s) for s in streams]


def build_m_rounds(batch: ImageBatch, config: MixRoundConfig, m_rounds: int,
                   rng: np.random.Generator) -> list[ImageBatch]:
    """M transformed batches, each with fresh augmentations, shuffle, masks."""
    b = len(batch)
    h, w = batch.images.shape[2], batch.images.shape[3]
    plans = sample_m_round_plans(b, h, w, config, m_rounds, rng)
    return [apply_round_plan(batch, p) for p in plans]
