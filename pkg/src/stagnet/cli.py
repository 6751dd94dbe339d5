"""Command-line entry point tying bundles, training, and evaluation together.

Subcommands: synth, validate, train, eval, crossval, xdataset, gradcheck.
Every run writes a ``run_manifest.json`` (command, flags, config hash, seed,
versions) beside its outputs. Exit codes: 0 success, 1 validation or contract
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

import stagnet
from stagnet.config import TrainConfig
from stagnet.data import (
    BundleError,
    SyntheticConfig,
    load_bundle,
    synth_generate,
    validate_bundle,
    write_bundle,
)
from stagnet.gradcheck import TOLERANCE, run_suite
from stagnet.metrics import MetricError, compute_report
from stagnet.model import STAGNet, write_predictions
from stagnet.report import write_report
from stagnet.training import (
    cross_dataset_run,
    fit,
    kfold_run,
    predict_videos,
    prepare_all,
    stratified_folds,
)

CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
CHOICES = {
    "spatial_norm": ("global", "row"),
    "edge_mode": ("weighted_log", "binary"),
    "attention": ("gatv2", "uniform"),
    "pool": ("mean", "max"),
    "label_mode": ("all", "pre_onset"),
    "select": ("best", "last"),
}
BUNDLE_DIMS = ("d1", "d2", "h", "slots")


def default_out(command: str) -> str:
    root = os.environ.get("STAGNET_OUT", "stagnet-out")
    return str(Path(root) / command)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig key; unset flags fall back to file/bundle/defaults."""
    parser.add_argument("--config", metavar="FILE", help="JSON file with TrainConfig keys")
    for name, field in CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if field.type == "bool":
            parser.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif name in CHOICES:
            parser.add_argument(flag, dest=name, choices=CHOICES[name], default=None)
        else:
            ftype = float if field.type == "float" else int
            parser.add_argument(flag, dest=name, type=ftype, default=None)


def resolve_config(args: argparse.Namespace, bundle=None) -> TrainConfig:
    """Defaults < config file < bundle dims < explicit flags."""
    values = dataclasses.asdict(TrainConfig())
    file_values = {}
    if args.config:
        file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        values.update(file_values)
    explicit = {name: getattr(args, name) for name in CONFIG_FIELDS if getattr(args, name, None) is not None}
    if bundle is not None:
        manifest = bundle.manifest
        for dim in BUNDLE_DIMS:
            if dim not in explicit and dim not in file_values:
                values[dim] = getattr(manifest, dim)
    values.update(explicit)
    config = TrainConfig.from_dict(values)
    if bundle is not None:
        manifest = bundle.manifest
        for dim in BUNDLE_DIMS:
            if getattr(config, dim) != getattr(manifest, dim):
                raise ValueError(
                    f"config {dim}={getattr(config, dim)} does not match bundle {dim}={getattr(manifest, dim)}"
                )
    return config


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                       config_hash: str | None, seed: int | None) -> None:
    flags = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "command") and v is not None
    }
    manifest = {
        "command": command,
        "flags": flags,
        "config_hash": config_hash,
        "seed": seed,
        "versions": {
            "stagnet": stagnet.__version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    kwargs = {f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticConfig)
              if getattr(args, f.name, None) is not None}
    config = SyntheticConfig(**kwargs)
    bundle = synth_generate(config)
    out = Path(args.out)
    write_bundle(out, bundle)
    (out / "synth_config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    write_run_manifest(out, "synth", args, None, config.seed)
    print(f"wrote {len(bundle.video_ids())} videos ({bundle.positive_count()} positive) to {out}")
    return 0


def cmd_validate(args) -> int:
    bundle = load_bundle(args.bundle)
    report = validate_bundle(bundle)
    for video_id, reason in report.failures:
        print(f"FAIL {video_id}: {reason}")
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation_report.json").write_text(
            json.dumps({
                "checked": report.checked,
                "failures": [{"video_id": v, "reason": r} for v, r in report.failures],
                "ok": report.ok,
            }, indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        write_run_manifest(out, "validate", args, None, None)
    return 0 if report.ok else 1


def cmd_train(args) -> int:
    bundle = load_bundle(args.bundle)
    config = resolve_config(args, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = bundle.video_ids()
    val_ids = None
    if args.val_fraction > 0:
        labels = {v: bundle.label(v) for v in ids}
        holdout_folds = max(2, round(1.0 / args.val_fraction))
        split = stratified_folds(ids, labels, holdout_folds, config.seed)[0]
        ids, val_ids = split.train_ids, split.test_ids
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_file:
        result = fit(bundle, config, train_ids=ids, val_ids=val_ids, log_file=log_file)
    result.model.save(out / "model.stag")
    (out / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    write_run_manifest(out, "train", args, config.hash(), config.seed)
    last = result.history[-1]
    best = f", best epoch {result.best_epoch}" if result.best_epoch else ""
    print(f"trained {config.epochs} epochs, final loss {last.mean_loss:.6f}{best}; checkpoint at {out / 'model.stag'}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    if args.checkpoint:
        model = STAGNet.from_checkpoint(args.checkpoint)
        config = model.config
        for dim in BUNDLE_DIMS:
            if getattr(config, dim) != getattr(bundle.manifest, dim):
                raise ValueError(
                    f"checkpoint {dim}={getattr(config, dim)} does not match bundle {dim}={getattr(bundle.manifest, dim)}"
                )
    else:
        config = resolve_config(args, bundle)
        model = STAGNet(config)  # fresh-init evaluation
    out = Path(args.out)
    prepared = prepare_all(bundle, config)
    series = predict_videos(model, prepared, bundle.video_ids())
    report = compute_report(series, with_video_level=args.video_level)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.jsonl", series)
    write_report(report, out, records=series, plots=args.plots)
    write_run_manifest(out, "eval", args, config.hash(), config.seed)
    print(f"AP {100 * report.ap:.2f}%  mTTA {report.mtta:.2f}s  baseline AP {100 * report.baseline_ap:.1f}%")
    return 0


def cmd_crossval(args) -> int:
    bundle = load_bundle(args.bundle)
    config = resolve_config(args, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_file:
        result = kfold_run(bundle, config, log_file=log_file)
    summary = {
        "folds": [
            {"fold": o.fold, "ap": o.report.ap, "mtta_seconds": o.report.mtta,
             "baseline_ap": o.report.baseline_ap, "test_videos": len(o.test_ids)}
            for o in result.folds
        ],
        "mean_ap": result.mean_ap,
        "mean_mtta_seconds": result.mean_mtta,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    for outcome in result.folds:
        fold_dir = out / f"fold_{outcome.fold}"
        fold_dir.mkdir(exist_ok=True)
        write_predictions(fold_dir / "predictions.jsonl", outcome.predictions)
        write_report(outcome.report, fold_dir, records=outcome.predictions, plots=args.plots)
    write_run_manifest(out, "crossval", args, config.hash(), config.seed)
    for entry in summary["folds"]:
        print(f"fold {entry['fold']}: AP {100 * entry['ap']:.2f}%  mTTA {entry['mtta_seconds']:.2f}s")
    print(f"mean: AP {100 * result.mean_ap:.2f}%  mTTA {result.mean_mtta:.2f}s")
    return 0


def cmd_xdataset(args) -> int:
    train_bundle = load_bundle(args.train_bundle)
    test_bundle = load_bundle(args.test_bundle)
    config = resolve_config(args, train_bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_file:
        result = cross_dataset_run(train_bundle, test_bundle, config, log_file=log_file)
    write_predictions(out / "predictions.jsonl", result.predictions)
    write_report(result.report, out, records=result.predictions, plots=args.plots)
    extra = {
        "train_dataset": result.train_dataset,
        "test_dataset": result.test_dataset,
        "ap": result.report.ap,
        "mtta_seconds": result.report.mtta,
        "test_baseline_ap": result.report.baseline_ap,
    }
    (out / "xdataset.json").write_text(json.dumps(extra, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    write_run_manifest(out, "xdataset", args, config.hash(), config.seed)
    print(f"{result.train_dataset} -> {result.test_dataset}: AP {100 * result.report.ap:.2f}%  "
          f"mTTA {result.report.mtta:.2f}s  baseline AP {100 * result.report.baseline_ap:.1f}%")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, seeds=args.seeds, step=args.step)
    failed = False
    for name, err in results.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
        failed |= err > TOLERANCE
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n",
                                            encoding="utf-8")
        write_run_manifest(out, "gradcheck", args, None, args.seed)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagnet",
        description="accident anticipation on precomputed feature bundles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature bundle")
    for field in dataclasses.fields(SyntheticConfig):
        flag = "--" + field.name.replace("_", "-")
        ftype = {int: int, float: float, str: str}[type(getattr(SyntheticConfig(), field.name))]
        p.add_argument(flag, dest=field.name, type=ftype, default=None)
    p.add_argument("--out", default=default_out("synth"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="validate a bundle directory")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=default_out("train"))
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="stratified holdout used for best-epoch selection")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh-init model) on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--fresh", action="store_true", help="evaluate an untrained model")
    p.add_argument("--out", default=default_out("eval"))
    p.add_argument("--video-level", action="store_true")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold cross-validation on one bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default=default_out("crossval"))
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("xdataset", help="train on one bundle, evaluate on another")
    p.add_argument("--train-bundle", required=True)
    p.add_argument("--test-bundle", required=True)
    p.add_argument("--out", default=default_out("xdataset"))
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_xdataset)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per check")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.checkpoint and not args.fresh:
        parser.error("eval needs --checkpoint FILE or --fresh")
    try:
        return args.func(args)
    except BundleError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, MetricError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"error[contract]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
