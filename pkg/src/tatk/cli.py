"""Command-line entry point.

Subcommands cover the whole experiment cycle: ``gen-data`` writes a
synthetic dataset as a PPM tree, ``train`` fits every configured model and
saves checkpoints, ``attack`` generates adversarial examples from a
surrogate checkpoint, ``eval`` scores saved adversarials against target
checkpoints, ``sweep`` scans one attack knob, and ``grad-check`` runs the
finite-difference suite over all autodiff ops.

Exit codes: 0 success, 1 runtime error, 2 configuration error. The master
seed comes from --seed, else the TATK_SEED environment variable, else the
config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tatk import attack as atk
from tatk import config as cfgmod
from tatk import data as datamod
from tatk import evaluation, kernels, nn
from tatk.config import ConfigError
from tatk.gradcheck import check_all_ops


def _master_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TATK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"TATK_SEED must be an integer, got {env!r}") from exc
    return None


def _load_config(args) -> cfgmod.ExperimentConfig:
    if not getattr(args, "config", None):
        return cfgmod.ExperimentConfig()
    return cfgmod.load(args.config)


def _split_test(config, dataset):
    _, test = datamod.split(dataset, config.data.split_ratio, config.data.split_seed)
    return test


def _split_train(config, dataset):
    train, _ = datamod.split(dataset, config.data.split_ratio, config.data.split_seed)
    return train


# ---- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    seed = _master_seed(args)
    scene = datamod.SyntheticSceneConfig(
        num_classes=config.data.num_classes,
        images_per_class=config.data.images_per_class,
        image_size=config.data.image_size,
        seed=seed if seed is not None else config.data.seed,
    )
    dataset = datamod.generate_synthetic(scene)
    out = Path(args.out)
    datamod.save_dataset_dir(dataset, out)
    labels = dataset.labels()
    counts = {name: int((labels == i).sum()) for i, name in enumerate(dataset.class_names)}
    manifest = {
        "config_hash": cfgmod.config_hash(config),
        "seed": scene.seed,
        "image_size": scene.image_size,
        "num_classes": scene.num_classes,
        "counts": counts,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(dataset)} images across {scene.num_classes} classes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = datamod.load_image_dir(args.data)
    train_split = _split_train(config, dataset)
    test_split = _split_test(config, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = config.models
    c, h, w = 3, config.data.image_size, config.data.image_size
    for name, spec in m.entries:
        model_cfg = nn.ModelConfig(spec.architecture, (c, h, w),
                                   config.data.num_classes, spec.seed)
        model = nn.build_model(model_cfg)
        nn.train(model, train_split, epochs=m.epochs, lr=m.lr,
                 momentum=m.momentum, batch_size=m.batch_size, seed=spec.seed)
        acc_train = nn.evaluate_accuracy(model, train_split)
        acc_test = nn.evaluate_accuracy(model, test_split)
        path = out / f"{name}.ckpt"
        nn.save_checkpoint(model, path)
        reloaded = nn.evaluate_accuracy(nn.load_checkpoint(path), test_split)
        assert reloaded == acc_test
        print(f"{name} ({spec.architecture}): train_acc={acc_train:.4f} "
              f"test_acc={acc_test:.4f} -> {path}")
    return 0


def _attack_config(config, args) -> atk.AttackConfig:
    attack_cfg = atk.variant_config(getattr(args, "variant", "ours"), config.attack)
    seed = _master_seed(args)
    if seed is not None:
        attack_cfg = replace(attack_cfg, seed=seed)
    return attack_cfg


def cmd_attack(args) -> int:
    config = _load_config(args)
    attack_cfg = _attack_config(config, args)

    surrogate_path = Path(args.surrogate_ckpt)
    if not surrogate_path.exists():
        raise FileNotFoundError(f"missing checkpoint {surrogate_path}")
    surrogate = nn.load_checkpoint(surrogate_path)
    surrogate_id = surrogate_path.stem

    ckpt_dir = surrogate_path.parent
    filter_models = {surrogate_id: surrogate}
    for name in [config.eval.surrogate] + config.target_names():
        if name in filter_models:
            continue
        path = ckpt_dir / f"{name}.ckpt"
        if not path.exists():
            raise FileNotFoundError(
                f"missing checkpoint {path} (listed in [eval], required for filtering)"
            )
        filter_models[name] = nn.load_checkpoint(path)

    dataset = datamod.load_image_dir(args.data)
    test_split = _split_test(config, dataset)
    candidates = evaluation.filter_candidates(filter_models, test_split)
    print(f"{len(candidates)} candidates survive filtering by {len(filter_models)} models")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_lines: list[str] = []

    def trace_hook(chunk_index, result):
        for st in result.trace:
            trace_lines.append(f"batch={chunk_index} {st.line()}")

    adv = evaluation.generate_adversarials(surrogate, candidates, attack_cfg,
                                           surrogate_index=0, trace_hook=trace_hook)
    names = candidates.class_names or dataset.class_names
    adv_ds = datamod.Dataset(
        [(adv.images.data[i], int(adv.labels[i])) for i in range(len(adv))],
        split_tag="adversarial", class_names=names,
    )
    datamod.save_dataset_dir(adv_ds, out)
    (out / "trace.log").write_text("\n".join(trace_lines) + "\n")
    manifest = {
        "config_hash": cfgmod.config_hash(config),
        "surrogate": surrogate_id,
        "variant": args.variant,
        "seed": attack_cfg.seed,
        "epsilon": attack_cfg.epsilon,
        "n_images": len(adv),
        "class_names": names,
        "kernel_backend": kernels.BACKEND,
        "clean_dataset": evaluation.dataset_fingerprint(candidates),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(adv)} adversarial images to {out} "
          f"(white-box success on surrogate: "
          f"{100.0 * float((nn.predict(surrogate, adv.images) != adv.labels).mean()):.2f}%)")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    adv_dir = Path(args.adv_dir)
    adv_ds = datamod.load_image_dir(adv_dir)
    manifest_path = adv_dir / "manifest.json"
    surrogate_id = "surrogate"
    metadata = {"config_hash": cfgmod.config_hash(config)}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        surrogate_id = manifest.get("surrogate", surrogate_id)
        metadata["seed"] = manifest.get("seed", config.attack.seed)
        metadata["variant"] = manifest.get("variant", "ours")

    batch = adv_ds.to_batch()
    records = {}
    target_ids = []
    for ckpt in args.checkpoints:
        target = nn.load_checkpoint(ckpt)
        tid = Path(ckpt).stem
        target_ids.append(tid)
        records[(surrogate_id, tid)] = evaluation.compute_asr(target, batch, batch.labels)
    matrix = evaluation.TransferMatrix([surrogate_id], target_ids, records, metadata)
    for line in matrix.table_lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"transfer_{metadata['config_hash']}"
        evaluation.export_matrix(matrix, out / f"{stem}.csv", "csv")
        evaluation.export_matrix(matrix, out / f"{stem}.json", "json")
        print(f"wrote {out / (stem + '.csv')}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    attack_cfg = _attack_config(config, args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be a comma-separated number list: {exc}") from exc
    if not values:
        raise ConfigError("--values is empty")

    dataset = datamod.load_image_dir(args.data)
    test_split = _split_test(config, dataset)
    ckpt_dir = Path(args.ckpt_dir)
    names = [config.eval.surrogate] + config.target_names()
    models = {}
    for name in names:
        path = ckpt_dir / f"{name}.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        models[name] = nn.load_checkpoint(path)

    report = evaluation.run_sweep(models, test_split, attack_cfg, args.parameter,
                                  values, jobs=args.jobs,
                                  metadata={"config_hash": cfgmod.config_hash(config)})
    header = f"{args.parameter:>10} " + "".join(f"{t:>12}" for t in names) + f"{'OASR':>12}"
    print(header)
    for row in report.rows:
        cells = "".join(f"{row.records[t].asr_percent:>12.2f}" for t in names)
        print(f"{row.value:>10.4g} {cells}{row.oasr(report.surrogate_id):>12.2f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"sweep_{args.parameter}_{cfgmod.config_hash(config)}"
    evaluation.export_sweep(report, out / f"{stem}.csv", "csv")
    evaluation.export_sweep(report, out / f"{stem}.json", "json")
    print(f"wrote {out / (stem + '.csv')}")
    return 0


def cmd_grad_check(args) -> int:
    report = check_all_ops(seed=args.seed if args.seed is not None else 0,
                           corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    print(f"max relative error: {report.max_error:.3e}")
    return 0 if report.passed else 1


# ---- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tatk",
        description="Transferable adversarial-example toolkit",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides TATK_SEED and config seeds)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic dataset as a PPM tree")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train every configured model, save checkpoints")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("data", help="dataset directory (class-per-directory PPM tree)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common],
                       help="generate adversarial examples from a surrogate")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="adversarial output directory")
    p.add_argument("--variant", choices=atk.VARIANTS, default="ours",
                   help="attack variant (degenerate baseline configs)")
    p.add_argument("surrogate_ckpt", help="surrogate checkpoint file")
    p.add_argument("data", help="dataset directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common],
                       help="score saved adversarials against checkpoints")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="directory for CSV/JSON results")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluation jobs")
    p.add_argument("adv_dir", help="adversarial directory written by the attack command")
    p.add_argument("checkpoints", nargs="+", help="target checkpoint files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="scan one attack parameter")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="directory for CSV/JSON results")
    p.add_argument("--jobs", type=int, default=1, help="parallel jobs")
    p.add_argument("--parameter", required=True, choices=evaluation.SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("data", help="dataset directory")
    p.add_argument("ckpt_dir", help="directory holding <model>.ckpt files")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of all autodiff ops")
    p.add_argument("--corrupt", action="store_true",
                   help="include a deliberately broken backward rule (self-test)")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
