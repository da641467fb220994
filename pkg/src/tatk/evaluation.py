"""Transfer-matrix evaluation, candidate filtering, sweeps, and export.

A transfer experiment fixes a candidate pool (test samples every model
classifies correctly), generates adversarial examples once per surrogate,
and scores them against every target. The attack success rate of a cell is
the percentage of candidates the target misclassifies; the diagonal is the
white-box rate, and a surrogate's overall rate averages its off-diagonal
row. Results export to CSV and JSON with enough metadata (config hash,
seeds, dataset fingerprint) to reproduce them bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from tatk import attack as atk
from tatk import transforms as tr
from tatk.attack import AttackConfig
from tatk.data import Dataset, ImageBatch
from tatk.nn import Model, predict
from tatk.tensor import Tensor

SWEEP_PARAMETERS = ("M", "eta", "lambda")


@dataclass(frozen=True)
class ASRRecord:
    n_error: int
    n_total: int

    def __post_init__(self):
        if self.n_error > self.n_total:
            raise ValueError(f"n_error {self.n_error} exceeds n_total {self.n_total}")

    @property
    def asr_percent(self) -> float:
        return 100.0 * self.n_error / self.n_total


@dataclass
class TransferMatrix:
    surrogate_ids: list[str]
    target_ids: list[str]
    records: dict[tuple[str, str], ASRRecord]
    metadata: dict = field(default_factory=dict)

    def asr(self, surrogate: str, target: str) -> float:
        return self.records[(surrogate, target)].asr_percent

    def oasr(self, surrogate: str) -> float:
        """Mean ASR over the surrogate's black-box (off-diagonal) targets."""
        rates = [self.asr(surrogate, t) for t in self.target_ids if t != surrogate]
        if not rates:
            raise ValueError("no black-box targets to average")
        return float(np.mean(rates))

    def table_lines(self) -> list[str]:
        width = max(9, max(len(t) for t in self.target_ids) + 2)
        head = "surrogate".ljust(12) + "".join(t.rjust(width) for t in self.target_ids)
        lines = [head]
        for s in self.surrogate_ids:
            row = s.ljust(12) + "".join(
                f"{self.asr(s, t):.2f}".rjust(width) for t in self.target_ids
            )
            lines.append(row)
        return lines


def dataset_fingerprint(dataset: Dataset) -> str:
    """Short content hash identifying a dataset's images and labels."""
    digest = hashlib.sha256()
    for img, label in dataset.items:
        digest.update(np.ascontiguousarray(img).tobytes())
        digest.update(int(label).to_bytes(4, "little"))
    return digest.hexdigest()[:12]


def filter_candidates(models: dict[str, Model], dataset: Dataset,
                      batch_size: int = 64) -> Dataset:
    """Samples every model classifies correctly; the attack's candidate pool."""
    if not models:
        raise ValueError("need at least one model to filter candidates")
    keep = np.ones(len(dataset), dtype=bool)
    labels = dataset.labels()
    for model in models.values():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            batch = dataset.to_batch(idx)
            pred = predict(model, batch.images)
            keep[list(idx)] &= pred == labels[list(idx)]
    if not keep.any():
        raise ValueError("no common-correct samples: every candidate was filtered out")
    return dataset.subset(np.flatnonzero(keep))


def compute_asr(target: Model, adversarial: ImageBatch, true_labels: np.ndarray) -> ASRRecord:
    """Eq.-style success rate: fraction of adversarials the target mislabels."""
    if len(adversarial) == 0:
        raise ValueError("cannot compute ASR on an empty batch")
    pred = predict(target, adversarial.images)
    n_error = int((pred != np.asarray(true_labels)).sum())
    return ASRRecord(n_error, len(adversarial))


def _chunk_seed(base_seed: int, surrogate_index: int, chunk_index: int) -> int:
    seq = np.random.SeedSequence([base_seed, surrogate_index, chunk_index])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def generate_adversarials(surrogate: Model, candidates: Dataset, config: AttackConfig,
                          surrogate_index: int = 0, trace_hook=None) -> ImageBatch:
    """Attack the candidate pool in deterministic batch-size chunks.

    ``trace_hook(chunk_index, attack_result)`` is invoked per chunk when
    given (the CLI uses it to write the iteration trace log).
    """
    images = []
    labels = []
    for chunk_index, start in enumerate(range(0, len(candidates), config.batch_size)):
        idx = range(start, min(start + config.batch_size, len(candidates)))
        batch = candidates.to_batch(idx)
        chunk_cfg = replace(config, seed=_chunk_seed(config.seed, surrogate_index, chunk_index))
        result = atk.run_attack(surrogate, batch, chunk_cfg)
        if trace_hook is not None:
            trace_hook(chunk_index, result)
        images.append(result.adversarial.images.data)
        labels.append(result.adversarial.labels)
    return ImageBatch(Tensor(np.concatenate(images)), np.concatenate(labels))


def _transfer_row(args):
    surrogate_index, surrogate_id, models, candidates, config = args
    adv = generate_adversarials(models[surrogate_id], candidates, config, surrogate_index)
    row = {}
    for target_id, target in models.items():
        row[(surrogate_id, target_id)] = compute_asr(target, adv, adv.labels)
    return row


def run_transfer_experiment(models: dict[str, Model], dataset: Dataset,
                            config: AttackConfig, jobs: int = 1,
                            metadata: dict | None = None,
                            candidates: Dataset | None = None) -> TransferMatrix:
    """Full surrogate-by-target grid over the common-correct candidate pool.

    Adversarials are generated once per surrogate and reused for every
    target. Rows are independent, so ``jobs`` > 1 distributes them across
    processes without changing any bit of the result.
    """
    if len(models) < 2:
        raise ValueError("transfer experiment needs at least two models")
    if candidates is None:
        candidates = filter_candidates(models, dataset)
    ids = list(models)
    work = [(i, sid, models, candidates, config) for i, sid in enumerate(ids)]
    records: dict[tuple[str, str], ASRRecord] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_transfer_row, work):
                records.update(row)
    else:
        for item in work:
            records.update(_transfer_row(item))
    meta = {
        "n_candidates": len(candidates),
        "dataset": dataset_fingerprint(candidates),
        "seed": config.seed,
    }
    if metadata:
        meta.update(metadata)
    return TransferMatrix(ids, ids, records, meta)


# ---- parameter sweeps ----------------------------------------------------------


@dataclass
class SweepRow:
    parameter: str
    value: float
    records: dict[str, ASRRecord]  # target id -> record

    def oasr(self, surrogate_id: str) -> float:
        rates = [r.asr_percent for t, r in self.records.items() if t != surrogate_id]
        return float(np.mean(rates))


@dataclass
class SweepReport:
    parameter: str
    surrogate_id: str
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)


def sweep_config(base: AttackConfig, parameter: str, value: float) -> AttackConfig:
    """Attack config with one swept knob changed.

    The eta axis follows the mixing-strength convention: the swept value is
    the share of the shuffled image blended inside the rectangle, so 0 means
    no mixing at all (the no-mix configuration) and 0.5 matches the default.
    """
    if parameter == "M":
        return replace(base, rounds=int(value))
    if parameter == "lambda":
        return replace(base, loss=replace(base.loss, smoothing_weight=float(value)))
    if parameter == "eta":
        if value == 0.0:
            return replace(base, mix_strategy="no_mix")
        if not 0.0 < value < 1.0:
            raise ValueError(f"eta sweep values must be in [0,1), got {value}")
        return replace(base, mix_strategy="local_mix",
                       mix=replace(base.mix, eta=1.0 - float(value)))
    raise ValueError(f"unknown sweep parameter {parameter!r}; expected {SWEEP_PARAMETERS}")


def run_sweep(models: dict[str, Model], dataset: Dataset, base_config: AttackConfig,
              parameter: str, values: list[float], jobs: int = 1,
              metadata: dict | None = None) -> SweepReport:
    """One transfer row (first model as surrogate, all models as targets)
    per swept value."""
    if not values:
        raise ValueError("sweep needs at least one value")
    surrogate_id = next(iter(models))
    candidates = filter_candidates(models, dataset)
    rows = []
    for value in values:
        cfg = sweep_config(base_config, parameter, value)
        adv = generate_adversarials(models[surrogate_id], candidates, cfg, 0)
        records = {tid: compute_asr(t, adv, adv.labels) for tid, t in models.items()}
        rows.append(SweepRow(parameter, float(value), records))
    meta = {
        "n_candidates": len(candidates),
        "dataset": dataset_fingerprint(candidates),
        "seed": base_config.seed,
        "surrogate": surrogate_id,
    }
    if metadata:
        meta.update(metadata)
    return SweepReport(parameter, surrogate_id, rows, meta)


# ---- export --------------------------------------------------------------------

MATRIX_CSV_HEADER = ["surrogate", "target", "asr", "n_error", "n_total"]
SWEEP_CSV_HEADER = ["parameter", "value", "target", "asr", "n_error", "n_total"]


def _meta_comment(metadata: dict) -> str:
    fields = " ".join(f"{k}={metadata[k]}" for k in sorted(metadata))
    return f"# {fields}"


def export_matrix(matrix: TransferMatrix, path, fmt: str = "csv") -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(_meta_comment(matrix.metadata) + "\n")
            writer = csv.writer(fh)
            writer.writerow(MATRIX_CSV_HEADER)
            for s in matrix.surrogate_ids:
                for t in matrix.target_ids:
                    rec = matrix.records[(s, t)]
                    writer.writerow([s, t, repr(rec.asr_percent), rec.n_error, rec.n_total])
    elif fmt == "json":
        payload = {
            "metadata": matrix.metadata,
            "surrogates": matrix.surrogate_ids,
            "targets": matrix.target_ids,
            "records": [
                {"surrogate": s, "target": t,
                 "asr": matrix.records[(s, t)].asr_percent,
                 "n_error": matrix.records[(s, t)].n_error,
                 "n_total": matrix.records[(s, t)].n_total}
                for s in matrix.surrogate_ids for t in matrix.target_ids
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}; expected csv or json")


def load_matrix_csv(path) -> TransferMatrix:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if header != MATRIX_CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    records = {}
    surrogates: list[str] = []
    targets: list[str] = []
    for s, t, _asr, n_error, n_total in reader:
        records[(s, t)] = ASRRecord(int(n_error), int(n_total))
        if s not in surrogates:
            surrogates.append(s)
        if t not in targets:
            targets.append(t)
    return TransferMatrix(surrogates, targets, records)


def export_sweep(report: SweepReport, path, fmt: str = "csv") -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(_meta_comment(report.metadata) + "\n")
            writer = csv.writer(fh)
            writer.writerow(SWEEP_CSV_HEADER)
            for row in report.rows:
                for t, rec in row.records.items():
                    writer.writerow([row.parameter, repr(row.value), t,
                                     repr(rec.asr_percent), rec.n_error, rec.n_total])
    elif fmt == "json":
        payload = {
            "metadata": report.metadata,
            "parameter": report.parameter,
            "surrogate": report.surrogate_id,
            "rows": [
                {"value": row.value,
                 "records": {t: {"asr": rec.asr_percent, "n_error": rec.n_error,
                                 "n_total": rec.n_total}
                             for t, rec in row.records.items()}}
                for row in report.rows
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}; expected csv or json")
