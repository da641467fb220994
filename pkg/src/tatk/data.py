"""Datasets: procedural synthetic scenes, P6 PPM I/O, splits, directory trees.

The synthetic generator composites one class-identifying shape onto a
background drawn independently of the class (gradient, smoothed noise, or
tiled pattern), echoing scenes whose backgrounds vary wildly while the
object family stays consistent. Pixels live in [0,1] everywhere; files on
disk are 8-bit P6 PPM, the project's only codec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from tatk.tensor import Tensor

BACKGROUND_KINDS = ("gradient", "noise", "tiles")

# class index -> shape family, in fixed order
SHAPE_FAMILIES = ("disk", "square", "triangle", "plus", "ring", "diamond", "hbar", "xcross")


class DataError(ValueError):
    """Raised for malformed datasets or image files."""


@dataclass
class ImageBatch:
    """A (b,c,h,w) image tensor in [0,1] plus integer labels."""

    images: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (b,c,h,w), got {self.images.shape}")
        if self.images.shape[0] != len(self.labels):
            raise DataError(
                f"{self.images.shape[0]} images vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    items: list[tuple[np.ndarray, int]]
    split_tag: str = "all"
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def to_batch(self, indices=None) -> ImageBatch:
        if indices is None:
            indices = range(len(self.items))
        images = np.stack([self.items[i][0] for i in indices])
        labels = np.array([self.items[i][1] for i in indices])
        return ImageBatch(Tensor(images), labels)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.split_tag, self.class_names)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_classes: int = 5
    images_per_class: int = 200
    image_size: int = 32
    background_kinds: tuple[str, ...] = BACKGROUND_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.num_classes > len(SHAPE_FAMILIES):
            raise ValueError(
                f"at most {len(SHAPE_FAMILIES)} classes supported "
                f"(one shape family each), got {self.num_classes}"
            )
        if self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} too small for shapes")
        for kind in self.background_kinds:
            if kind not in BACKGROUND_KINDS:
                raise ValueError(f"unknown background kind {kind!r}")


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "gradient":
        c0 = rng.uniform(0.1, 0.9, size=3)
        c1 = rng.uniform(0.1, 0.9, size=3)
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
        return c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]
    if kind == "noise":
        base = rng.uniform(size=(3, size + 4, size + 4))
        # 5x5 box blur via cumulative sums, then rescale into a random band
        cs = base.cumsum(axis=1).cumsum(axis=2)
        pad = np.zeros((3, size + 5, size + 5))
        pad[:, 1:, 1:] = cs
        win = pad[:, 5:, 5:] - pad[:, 5:, :-5] - pad[:, :-5, 5:] + pad[:, :-5, :-5]
        smooth = win / 25.0
        lo = rng.uniform(0.1, 0.4)
        hi = rng.uniform(0.6, 0.9)
        smin, smax = smooth.min(), smooth.max()
        return lo + (smooth - smin) / max(smax - smin, 1e-9) * (hi - lo)
    # tiles
    period = int(rng.integers(4, 9))
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy // period + xx // period) % 2).astype(float)
    return c0[:, None, None] * (1 - checker) + c1[:, None, None] * checker


def _shape_mask(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(0.30, 0.42) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if family == "disk":
        return dy**2 + dx**2 <= r**2
    if family == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r * 0.85
    if family == "triangle":
        # apex up: below the apex line and inside the two slanted edges
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.55)
    if family == "plus":
        arm = r * 0.33
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if family == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if family == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    if family == "hbar":
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    if family == "xcross":
        return (np.abs(dy - dx) <= r * 0.45) | (np.abs(dy + dx) <= r * 0.45)
    raise ValueError(f"unknown shape family {family!r}")


def generate_synthetic(config: SyntheticSceneConfig) -> Dataset:
    """Deterministic procedural dataset: same config and seed, same bytes."""
    rng = np.random.default_rng(config.seed)
    items: list[tuple[np.ndarray, int]] = []
    size = config.image_size
    for label in range(config.num_classes):
        family = SHAPE_FAMILIES[label]
        for _ in range(config.images_per_class):
            kind = config.background_kinds[int(rng.integers(len(config.background_kinds)))]
            img = _background(kind, size, rng)
            mask = _shape_mask(family, size, rng)
            # moderate contrast: the shape is clearly visible but close enough
            # to the background that classifiers keep small decision margins
            bg_mean = img[:, mask].mean() if mask.any() else 0.5
            offset = rng.uniform(0.26, 0.36)
            base = bg_mean - offset if bg_mean > 0.5 else bg_mean + offset
            color = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
            speckle = rng.uniform(-0.06, 0.06, size=(3, size, size))
            shade = np.clip(color[:, None, None] + speckle, 0.0, 1.0)
            img = np.where(mask[None], shade, img)
            items.append((np.clip(img, 0.0, 1.0), label))
    names = [f"class_{SHAPE_FAMILIES[i]}" for i in range(config.num_classes)]
    return Dataset(items, split_tag="all", class_names=names)


def split(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition; per class the train share is the
    rounded ratio (so 100 items at 0.8 give exactly 80/20)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0,1), got {ratio}")
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in np.unique(labels):
        cls = np.flatnonzero(labels == label)
        if len(cls) < 2:
            raise DataError(f"class {label} has {len(cls)} item(s); need at least 2")
        perm = rng.permutation(len(cls))
        n_train = int(round(ratio * len(cls)))
        n_train = min(max(n_train, 1), len(cls) - 1)
        train_idx.extend(cls[perm[:n_train]])
        test_idx.extend(cls[perm[n_train:]])
    train_idx.sort()
    test_idx.sort()
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    train.split_tag = "train"
    test.split_tag = "test"
    return train, test


# ---- P6 PPM ------------------------------------------------------------------


def write_ppm(image: np.ndarray, path) -> None:
    """Write a (3,h,w) [0,1] image as binary PPM with round-half-up quantization."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm expects a (3,h,w) image, got {image.shape}")
    quant = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape[1], image.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(quant.transpose(1, 2, 0).tobytes())


def _read_header_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(blob):
            raise DataError("truncated PPM header")
        ch = blob[pos : pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(blob) and blob[pos : pos + 1] not in b" \t\r\n":
                pos += 1
            tokens.append(blob[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Read binary PPM into a (3,h,w) float image, pixel p mapped to p/255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        magic = blob[:2].decode("ascii", "replace")
        raise DataError(f"{path}: unsupported format {magic!r}; only binary P6 PPM")
    tokens, offset = _read_header_tokens(blob, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}; expected 255")
    payload = blob[offset : offset + 3 * h * w]
    if len(payload) != 3 * h * w:
        raise DataError(
            f"{path}: truncated payload: {len(payload)} bytes, expected {3 * h * w}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_image_dir(root) -> Dataset:
    """Load a directory-per-class tree of PPM files.

    Class index is the lexicographic rank of the class directory name;
    files inside each class are visited in sorted order, non-.ppm entries
    are ignored.
    """
    class_dirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_dirs:
        raise DataError(f"{root}: no class directories found")
    items: list[tuple[np.ndarray, int]] = []
    shape = None
    shape_src = None
    for label, name in enumerate(class_dirs):
        cdir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(cdir) if f.endswith(".ppm"))
        for fname in files:
            fpath = os.path.join(cdir, fname)
            img = read_ppm(fpath)
            if shape is None:
                shape, shape_src = img.shape, fpath
            elif img.shape != shape:
                raise DataError(
                    f"{fpath}: image shape {img.shape} differs from {shape} ({shape_src})"
                )
            items.append((img, label))
    if not items:
        raise DataError(f"{root}: class directories contain no .ppm files")
    return Dataset(items, split_tag="all", class_names=class_dirs)


def save_dataset_dir(dataset: Dataset, root) -> None:
    """Write a dataset as the class-directory PPM tree ``load_image_dir`` reads."""
    names = dataset.class_names or [
        f"class_{i}" for i in range(int(dataset.labels().max()) + 1)
    ]
    os.makedirs(root, exist_ok=True)
    counters = {name: 0 for name in names}
    for img, label in dataset.items:
        cdir = os.path.join(root, names[label])
        os.makedirs(cdir, exist_ok=True)
        idx = counters[names[label]]
        counters[names[label]] += 1
        write_ppm(img, os.path.join(cdir, f"img_{idx:05d}.ppm"))
