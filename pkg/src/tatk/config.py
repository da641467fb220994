"""Experiment configuration files: key=value pairs under bracketed sections.

The format is dependency-free and diff-friendly. Four sections mirror the
experiment stages: [data] (synthetic scene generation and splitting),
[models] (training hyperparameters plus one ``name = arch:seed`` entry per
model), [attack] (every attack knob), [eval] (surrogate and target names).
Unknown sections or keys are errors; ``parse(render(config)) == config``
holds exactly, and the canonical rendering hashes to the config id stamped
into result files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from tatk.attack import MIX_STRATEGIES, AttackConfig
from tatk.losses import LOSS_KINDS, LossConfig
from tatk.nn import ARCHITECTURES
from tatk.transforms import MixRoundConfig


class ConfigError(ValueError):
    """Malformed experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"
    num_classes: int = 5
    images_per_class: int = 200
    image_size: int = 32
    seed: int = 7
    split_ratio: float = 0.8
    split_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "dir"):
            raise ConfigError(f"data.kind must be synthetic or dir, got {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    seed: int


@dataclass(frozen=True)
class ModelsSection:
    epochs: int = 15
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    entries: tuple[tuple[str, ModelSpec], ...] = (
        ("surrogate", ModelSpec("cnn_a", 101)),
        ("target_b", ModelSpec("cnn_b", 202)),
        ("target_c", ModelSpec("cnn_c", 303)),
        ("target_mlp", ModelSpec("mlp", 404)),
    )

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def spec(self, name: str) -> ModelSpec:
        for entry_name, spec in self.entries:
            if entry_name == name:
                return spec
        raise ConfigError(f"no model named {name!r} in [models]")


@dataclass(frozen=True)
class EvalSection:
    surrogate: str = "surrogate"
    targets: tuple[str, ...] | str = "all"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def target_names(self) -> list[str]:
        if self.eval.targets == "all":
            return [n for n in self.models.names() if n != self.eval.surrogate]
        return list(self.eval.targets)

    def validate(self) -> None:
        names = self.models.names()
        if not names:
            raise ConfigError("[models] needs at least one model entry")
        if self.eval.surrogate not in names:
            raise ConfigError(f"[eval] surrogate {self.eval.surrogate!r} is not a model entry")
        for t in self.target_names():
            if t not in names:
                raise ConfigError(f"[eval] target {t!r} is not a model entry")


_MODELS_RESERVED = ("epochs", "lr", "momentum", "batch_size")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(config: ExperimentConfig) -> str:
    """Canonical text form; hashing this string identifies the experiment."""
    d, m, a, e = config.data, config.models, config.attack, config.eval
    lines = [
        "[data]",
        f"kind = {d.kind}",
        f"num_classes = {d.num_classes}",
        f"images_per_class = {d.images_per_class}",
        f"image_size = {d.image_size}",
        f"seed = {d.seed}",
        f"split_ratio = {_fmt(d.split_ratio)}",
        f"split_seed = {d.split_seed}",
        "",
        "[models]",
        f"epochs = {m.epochs}",
        f"lr = {_fmt(m.lr)}",
        f"momentum = {_fmt(m.momentum)}",
        f"batch_size = {m.batch_size}",
    ]
    for name, spec in m.entries:
        lines.append(f"{name} = {spec.architecture}:{spec.seed}")
    lines += [
        "",
        "[attack]",
        f"epsilon = {_fmt(a.epsilon)}",
        f"alpha = {_fmt(a.alpha)}",
        f"iterations = {a.iterations}",
        f"rounds = {a.rounds}",
        f"eta = {_fmt(a.mix.eta)}",
        f"rect_min = {_fmt(a.mix.rect_fraction_range[0])}",
        f"rect_max = {_fmt(a.mix.rect_fraction_range[1])}",
        f"augment = {_fmt(a.mix.augmentation_enabled)}",
        f"lambda = {_fmt(a.loss.smoothing_weight)}",
        f"kernel_size = {a.loss.kernel_size}",
        f"loss = {a.loss.loss_kind}",
        f"mix_strategy = {a.mix_strategy}",
        f"use_momentum = {_fmt(a.use_momentum)}",
        f"batch_size = {a.batch_size}",
        f"seed = {a.seed}",
        "",
        "[eval]",
        f"surrogate = {e.surrogate}",
        "targets = " + ("all" if e.targets == "all" else ",".join(e.targets)),
        "",
    ]
    return "\n".join(lines)


def _parse_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from exc


def _parse_float(section: str, key: str, raw: str) -> float:
    try:
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
        return float(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from exc


def _parse_bool(section: str, key: str, raw: str) -> bool:
    if raw.lower() in ("true", "yes", "1"):
        return True
    if raw.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true/false, got {raw!r}")


def _split_sections(text: str) -> dict[str, list[tuple[str, str]]]:
    sections: dict[str, list[tuple[str, str]]] = {}
    current = None
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in ("data", "models", "attack", "eval"):
                raise ConfigError(f"line {line_no}: unknown section [{current}]")
            sections.setdefault(current, [])
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {line!r}")
        if current is None:
            raise ConfigError(f"line {line_no}: key outside any section")
        key, _, value = line.partition("=")
        sections[current].append((key.strip(), value.strip()))
    return sections


def parse(text: str) -> ExperimentConfig:
    sections = _split_sections(text)
    config = ExperimentConfig()

    data_kw = {}
    for key, value in sections.get("data", []):
        if key in ("num_classes", "images_per_class", "image_size", "seed", "split_seed"):
            data_kw[key] = _parse_int("data", key, value)
        elif key == "split_ratio":
            data_kw[key] = _parse_float("data", key, value)
        elif key == "kind":
            data_kw[key] = value
        else:
            raise ConfigError(f"[data] unknown key {key!r}")
    data = DataSection(**data_kw)

    models_kw = {}
    entries = []
    for key, value in sections.get("models", []):
        if key in ("epochs", "batch_size"):
            models_kw[key] = _parse_int("models", key, value)
        elif key in ("lr", "momentum"):
            models_kw[key] = _parse_float("models", key, value)
        else:
            arch, _, seed_raw = value.partition(":")
            if arch not in ARCHITECTURES:
                raise ConfigError(
                    f"[models] {key}: unknown architecture {arch!r} "
                    f"(expected one of {ARCHITECTURES}; model entries are name = arch:seed)"
                )
            seed = _parse_int("models", key, seed_raw) if seed_raw else 0
            entries.append((key, ModelSpec(arch, seed)))
    if entries:
        models_kw["entries"] = tuple(entries)
    models = ModelsSection(**models_kw)

    attack_kw: dict = {}
    mix_kw: dict = {}
    loss_kw: dict = {}
    rect = [None, None]
    for key, value in sections.get("attack", []):
        if key in ("epsilon", "alpha"):
            attack_kw[key] = _parse_float("attack", key, value)
        elif key in ("iterations", "rounds", "batch_size", "seed"):
            attack_kw[key] = _parse_int("attack", key, value)
        elif key == "use_momentum":
            attack_kw[key] = _parse_bool("attack", key, value)
        elif key == "mix_strategy":
            if value not in MIX_STRATEGIES:
                raise ConfigError(f"[attack] mix_strategy must be one of {MIX_STRATEGIES}")
            attack_kw[key] = value
        elif key == "eta":
            mix_kw["eta"] = _parse_float("attack", key, value)
        elif key == "rect_min":
            rect[0] = _parse_float("attack", key, value)
        elif key == "rect_max":
            rect[1] = _parse_float("attack", key, value)
        elif key == "augment":
            mix_kw["augmentation_enabled"] = _parse_bool("attack", key, value)
        elif key == "lambda":
            loss_kw["smoothing_weight"] = _parse_float("attack", key, value)
        elif key == "kernel_size":
            loss_kw["kernel_size"] = _parse_int("attack", key, value)
        elif key == "loss":
            if value not in LOSS_KINDS:
                raise ConfigError(f"[attack] loss must be one of {LOSS_KINDS}")
            loss_kw["loss_kind"] = value
        else:
            raise ConfigError(f"[attack] unknown key {key!r}")
    default_rect = MixRoundConfig().rect_fraction_range
    if rect != [None, None]:
        mix_kw["rect_fraction_range"] = (
            rect[0] if rect[0] is not None else default_rect[0],
            rect[1] if rect[1] is not None else default_rect[1],
        )
    try:
        if mix_kw:
            attack_kw["mix"] = replace(MixRoundConfig(), **mix_kw)
        if loss_kw:
            attack_kw["loss"] = replace(LossConfig(), **loss_kw)
        attack = AttackConfig(**attack_kw)
    except ValueError as exc:
        raise ConfigError(f"[attack] {exc}") from exc

    eval_kw: dict = {}
    for key, value in sections.get("eval", []):
        if key == "surrogate":
            eval_kw["surrogate"] = value
        elif key == "targets":
            eval_kw["targets"] = "all" if value == "all" else tuple(
                t.strip() for t in value.split(",") if t.strip()
            )
        else:
            raise ConfigError(f"[eval] unknown key {key!r}")
    ev = EvalSection(**eval_kw)

    config = ExperimentConfig(data, models, attack, ev)
    config.validate()
    return config


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(render(config).encode()).hexdigest()[:12]
