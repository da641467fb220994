"""Small classifier architectures, SGD training, and checkpoint files.

Four architectures form the desk-scale model zoo: three CNNs with distinct
depth/width/kernel schedules plus an MLP, giving heterogeneous targets for
transfer measurement. Initialization is He-uniform from the config seed, so
(config, dataset, seed) fully determines the trained parameters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from tatk import tensor as T
from tatk.tensor import Tensor

ARCHITECTURES = ("cnn_a", "cnn_b", "cnn_c", "mlp")

CHECKPOINT_MAGIC = b"TATK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File carries an unsupported format version."""


class CheckpointChecksumError(CheckpointError):
    """Payload CRC-32 does not match the trailer."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class TrainingDivergedError(RuntimeError):
    """Loss became NaN during training."""


@dataclass(frozen=True)
class ModelConfig:
    architecture_id: str = "cnn_a"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.architecture_id not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.architecture_id!r}; expected one of {ARCHITECTURES}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


# conv layer: (out_channels, kernel_size, pool_after)
_CONV_SCHEDULES = {
    "cnn_a": [(16, 3, 2), (32, 3, 2)],
    "cnn_b": [(8, 5, 2), (16, 3, 2), (32, 3, 2)],
    "cnn_c": [(20, 7, 4), (40, 3, 2)],
}
# hidden widths of fully connected layers appended after the conv stack
_FC_SCHEDULES = {
    "cnn_a": [],
    "cnn_b": [64],
    "cnn_c": [],
    "mlp": [128, 64],
}


class Model:
    """A classifier with named parameters and a deterministic forward pass."""

    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters
        self.training_mode = False

    def param_vector_size(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def forward_logits(self, x: Tensor) -> Tensor:
        """Pre-softmax logits for a (b,c,h,w) batch."""
        c, h, w = self.config.input_shape
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise T.ShapeError(
                f"input shape {x.shape} does not match model input {(c, h, w)}"
            )
        arch = self.config.architecture_id
        out = x
        for i, (_, _, pool) in enumerate(_CONV_SCHEDULES.get(arch, [])):
            wk = self.parameters[f"conv{i}.weight"]
            bk = self.parameters[f"conv{i}.bias"]
            out = T.add_bias(T.conv2d(out, wk, padding="zero"), bk).relu()
            out = T.max_pool2d(out, pool)
        out = out.reshape((x.shape[0], -1))
        n_fc = len(_FC_SCHEDULES[arch]) + 1
        for i in range(n_fc):
            wl = self.parameters[f"fc{i}.weight"]
            bl = self.parameters[f"fc{i}.bias"]
            out = T.add_bias(T.matmul(out, wl), bl)
            if i < n_fc - 1:
                out = out.relu()
        return out


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig) -> Model:
    """Instantiate a model with He-uniform weights drawn from config.seed."""
    c, h, w = config.input_shape
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    arch = config.architecture_id

    ch, sh, sw = c, h, w
    for i, (out_ch, k, pool) in enumerate(_CONV_SCHEDULES.get(arch, [])):
        if sh % pool or sw % pool:
            raise ValueError(
                f"input spatial dims incompatible with {arch} pooling schedule: "
                f"{(sh, sw)} not divisible by {pool}"
            )
        params[f"conv{i}.weight"] = Tensor(
            _he_uniform(rng, (out_ch, ch, k, k), ch * k * k), requires_grad=True
        )
        params[f"conv{i}.bias"] = Tensor(np.zeros(out_ch), requires_grad=True)
        ch, sh, sw = out_ch, sh // pool, sw // pool

    feat = ch * sh * sw
    widths = _FC_SCHEDULES[arch] + [config.num_classes]
    for i, width in enumerate(widths):
        params[f"fc{i}.weight"] = Tensor(
            _he_uniform(rng, (feat, width), feat), requires_grad=True
        )
        params[f"fc{i}.bias"] = Tensor(np.zeros(width), requires_grad=True)
        feat = width
    return Model(config, params)


def predict(model: Model, images: Tensor) -> np.ndarray:
    """Argmax class per image; ties break toward the lowest class index."""
    with T.no_grad():
        logits = model.forward_logits(images)
    return logits.data.argmax(axis=1)


def evaluate_accuracy(model: Model, dataset, batch_size: int = 64) -> float:
    """Fraction of dataset items whose argmax prediction matches the label."""
    n_correct = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.to_batch(range(start, min(start + batch_size, len(dataset))))
        n_correct += int((predict(model, batch.images) == batch.labels).sum())
    return n_correct / len(dataset)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy


def train(model: Model, dataset, epochs: int, lr: float, momentum: float = 0.9,
          batch_size: int = 32, seed: int = 0) -> TrainReport:
    """Minibatch SGD with momentum on softmax cross-entropy.

    Deterministic given the seed: batch order comes from a dedicated
    generator and parameter updates run in fixed name order.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    labels_arr = np.array([label for _, label in dataset.items])
    if labels_arr.max() >= model.config.num_classes:
        raise ValueError(
            f"dataset label {labels_arr.max()} out of range for "
            f"{model.config.num_classes} classes"
        )
    rng = np.random.default_rng(seed)
    names = sorted(model.parameters)
    velocity = {name: np.zeros_like(model.parameters[name].data) for name in names}
    report = TrainReport()
    model.training_mode = True
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        n_correct = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = dataset.to_batch(idx)
            model.zero_grad()
            logits = model.forward_logits(batch.images)
            loss = T.cross_entropy(T.softmax(logits), batch.labels)
            loss_val = loss.item()
            if np.isnan(loss_val):
                raise TrainingDivergedError(
                    f"NaN loss at epoch {epoch}, batch starting at {start}"
                )
            loss.backward()
            for name in names:
                p = model.parameters[name]
                velocity[name] = momentum * velocity[name] + p.grad
                p.data -= lr * velocity[name]
            total_loss += loss_val * len(idx)
            n_correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        report.epochs.append(EpochStats(epoch, total_loss / n, n_correct / n))
    model.training_mode = False
    return report


# ---- checkpoint serialization ---------------------------------------------
#
# layout: magic "TATK" | payload | crc32(payload) as u32 LE
# payload: version u16 | arch len+utf8 | c,h,w,classes u32 | seed i64
#          | n_params u32 | per param: name len+utf8, ndim u8, dims u32..., f8 LE data


def _serialize_payload(model: Model) -> bytes:
    cfg = model.config
    parts = [struct.pack("<H", CHECKPOINT_VERSION)]
    arch = cfg.architecture_id.encode()
    parts.append(struct.pack("<H", len(arch)))
    parts.append(arch)
    c, h, w = cfg.input_shape
    parts.append(struct.pack("<IIIIq", c, h, w, cfg.num_classes, cfg.seed))
    names = sorted(model.parameters)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        arr = model.parameters[name].data
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    payload = _serialize_payload(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    """Load a model; roundtrips reproduce logits bitwise."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointTruncatedError(f"{path}: too short for a checksum trailer")
    payload, (stored_crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointChecksumError(f"{path}: payload CRC-32 mismatch")
    r = _Reader(payload)
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, supported {CHECKPOINT_VERSION}"
        )
    (arch_len,) = r.unpack("<H")
    arch = r.take(arch_len).decode()
    c, h, w, num_classes, seed = r.unpack("<IIIIq")
    config = ModelConfig(arch, (c, h, w), num_classes, seed)
    model = build_model(config)
    (n_params,) = r.unpack("<I")
    expected = set(model.parameters)
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        data = np.frombuffer(r.take(int(np.prod(shape)) * 8), dtype="<f8").reshape(shape)
        if name not in expected:
            raise CheckpointFormatError(f"{path}: unexpected parameter {name!r}")
        if model.parameters[name].shape != shape:
            raise CheckpointFormatError(
                f"{path}: parameter {name!r} has shape {shape}, "
                f"architecture expects {model.parameters[name].shape}"
            )
        model.parameters[name] = Tensor(data.astype(np.float64), requires_grad=True)
        expected.discard(name)
    if expected:
        raise CheckpointFormatError(f"{path}: missing parameters {sorted(expected)}")
    return model
