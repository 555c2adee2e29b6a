"""Command line front end: convert, train, evaluate, report.

Exit codes: 0 success, 1 I/O failure, 2 bad usage or malformed input,
3 numerical failure (training diverged). Each invocation is a single
process working on local paths; TUMORSEG_DATA_ROOT supplies the default
data directory when --input/--dataset is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

from .data import SliceDataset
from .errors import (
    BadInputSize,
    BadThreshold,
    ConfigMismatch,
    CountMismatch,
    DivergedLoss,
    DuplicateStem,
    EmptySplit,
    InvalidBackbone,
    IoFailure,
    MissingField,
    MissingPrediction,
    MixedSplit,
    ShapeMismatch,
    UnsupportedContainer,
)
from .ingest import (
    CLASS_NAMES,
    SPLIT_NAMES,
    export_dataset,
    list_mat_files,
    load_mat_record,
    make_splits,
    proportional_counts,
    read_manifest,
    write_manifest,
)
from .metrics import MetricReport, evaluate_split
from .models import ArchConfig, BACKBONES, FAMILIES, build_model, load_model, param_count
from .reporting import ComparisonSet, metrics_table, pick_qualitative_stems, pr_chart, qualitative_grid
from .training import RunHistory, TrainConfig, train_run

DATA_ROOT_ENV = "TUMORSEG_DATA_ROOT"

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_USAGE_ERRORS = (
    ValueError,
    CountMismatch,
    DuplicateStem,
    MissingField,
    ShapeMismatch,
    UnsupportedContainer,
    InvalidBackbone,
    BadInputSize,
    BadThreshold,
    ConfigMismatch,
    EmptySplit,
    MixedSplit,
    MissingPrediction,
)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _data_root(value, flag) -> Path:
    if value:
        return Path(value)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise ValueError(f"{flag} not given and {DATA_ROOT_ENV} is unset")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return (h, w)
    except ValueError:
        raise ValueError(f"--size must look like 64x64, got {text!r}") from None


def _parse_splits(text: str) -> tuple[int, int, int]:
    try:
        a, b, c = (int(v) for v in text.split(","))
        return (a, b, c)
    except ValueError:
        raise ValueError(f"--splits must look like 2485,274,305, got {text!r}") from None


def cmd_convert(args) -> int:
    in_dir = _data_root(args.input, "--input")
    out_dir = Path(args.output)
    paths = list_mat_files(in_dir)
    if not paths:
        raise ValueError(f"no records found in {in_dir}")

    created_out = not out_dir.exists()
    own_files = [out_dir / "images", out_dir / "masks",
                 out_dir / "manifest.csv", out_dir / "dataset.json"]
    try:
        records = [load_mat_record(p) for p in paths]
        counts = args.splits or proportional_counts(len(records))
        if sum(counts) != len(records):
            raise CountMismatch(
                f"--splits {counts} must sum to the record count {len(records)}"
            )
        bounds = None
        if args.normalize == "global":
            lo = min(float(r.image.min()) for r in records)
            hi = max(float(r.image.max()) for r in records)
            bounds = (lo, hi)
        rows = export_dataset(records, out_dir, bit_depth=args.bit_depth,
                              norm_bounds=bounds)
        manifest = make_splits(
            [stem for stem, _, _ in rows],
            counts,
            args.seed,
            meta={stem: (label, pid) for stem, label, pid in rows},
        )
        write_manifest(manifest, out_dir / "manifest.csv")
        (out_dir / "dataset.json").write_text(
            json.dumps(
                {
                    "seed": args.seed,
                    "counts": list(manifest.counts),
                    "bit_depth": args.bit_depth,
                    "records": len(records),
                    "normalize": args.normalize,
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    except BaseException:
        # Never leave a half-written dataset behind.
        for item in own_files:
            if item.is_dir():
                shutil.rmtree(item, ignore_errors=True)
            elif item.exists():
                item.unlink(missing_ok=True)
        if created_out and out_dir.exists() and not any(out_dir.iterdir()):
            out_dir.rmdir()
        raise

    per_class = {name: 0 for name in CLASS_NAMES.values()}
    for r in records:
        per_class[r.class_name] += 1
    train_n, val_n, test_n = manifest.counts
    print(f"converted {len(records)} records -> {out_dir}")
    print(
        "classes: "
        + ", ".join(f"{name}={per_class[name]}" for name in per_class)
    )
    print(f"splits: train={train_n}, val={val_n}, test={test_n} (seed {args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset_root = _data_root(args.dataset, "--dataset")
    arch = ArchConfig(
        family=args.arch,
        backbone=args.backbone,
        depth=args.depth,
        base_width=args.base_width,
        input_size=_parse_size(args.size),
        recurrence_steps=args.recurrence_steps,
        seed=args.seed,
    )
    arch.validate()
    train_cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )
    train_cfg.validate()

    train_set = SliceDataset(dataset_root, "train", arch.input_size)
    val_set = SliceDataset(dataset_root, "val", arch.input_size)
    if len(train_set) == 0:
        raise EmptySplit(f"no training records in {dataset_root}")
    if len(val_set) == 0:
        raise EmptySplit(f"no validation records in {dataset_root}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"arch": asdict(arch), "train": asdict(train_cfg)}
    (out_dir / "config.json").write_text(
        json.dumps(resolved, indent=2) + "\n", encoding="utf-8"
    )

    model = build_model(arch)
    print(f"training {arch.display_name} ({param_count(model)} parameters) "
          f"on {len(train_set)} train / {len(val_set)} val records")
    checkpoint = out_dir / "best.pt"
    try:
        history = train_run(model, train_set, val_set, train_cfg, checkpoint)
    except DivergedLoss as exc:
        if exc.history is not None and exc.history.rows:
            exc.history.to_csv(out_dir / "history.csv")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    history.to_csv(out_dir / "history.csv")
    best = max(history.rows, key=lambda r: r.val_miou)
    print(f"done: best val mean-IoU {best.val_miou:.4f} at epoch {best.epoch}; "
          f"checkpoint {checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset_root = _data_root(args.dataset, "--dataset")
    model = load_model(args.checkpoint)
    dataset = SliceDataset(dataset_root, args.split, model.config.input_size)
    report = evaluate_split(
        model,
        dataset,
        split=args.split,
        threshold=args.threshold,
        aggregation=args.aggregation,
        model_name=model.config.display_name,
    )
    report.save(args.out)
    print(
        f"{report.model} on {report.split} (threshold {report.threshold}, "
        f"{report.aggregation}): precision={report.precision:.4f} "
        f"recall={report.recall:.4f} f1={report.f1:.4f} mean_iou={report.mean_iou:.4f}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.reports:
        raise ValueError("need at least one report file")
    entries = []
    for path in args.reports:
        report = MetricReport.load(path)
        name = report.model or Path(path).stem
        entries.append((name, report))
    cset = ComparisonSet(entries)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.md").write_text(metrics_table(cset, "markdown"), encoding="utf-8")
    (out_dir / "table.csv").write_text(metrics_table(cset, "csv"), encoding="utf-8")
    pr_chart(cset, out_dir / "pr_chart.png")
    print(metrics_table(cset, "text"), end="")
    if args.qualitative:
        if not args.models:
            raise ValueError("--qualitative needs --models checkpoints")
        dataset_root = _data_root(args.dataset, "--dataset")
        manifest = read_manifest(Path(dataset_root) / "manifest.csv")
        stems = pick_qualitative_stems(manifest, n=args.qualitative, seed=args.seed)
        if not stems:
            raise EmptySplit("test split holds no records for the qualitative grid")
        grid = qualitative_grid(dataset_root, stems, args.models, out_dir / "grid.png")
        print(f"qualitative grid: {grid} ({len(stems)} samples x "
              f"{2 + len(args.models)} columns)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tumorseg",
        description="Brain tumor segmentation pipeline: dataset conversion, "
        "training, evaluation and reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert .mat records to a PNG dataset")
    p.add_argument("--input", help=f"folder of .mat records (default ${DATA_ROOT_ENV})")
    p.add_argument("--output", required=True, help="dataset folder to create")
    p.add_argument("--splits", type=_parse_splits, default=None,
                   help="train,val,test counts (default: proportional rule)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--normalize", choices=("per-image", "global"), default="per-image")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--dataset", help=f"converted dataset folder (default ${DATA_ROOT_ENV})")
    p.add_argument("--arch", required=True, choices=FAMILIES)
    p.add_argument("--backbone", choices=BACKBONES, default="none")
    p.add_argument("--size", default="64x64", help="input HxW (default 64x64)")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--recurrence-steps", type=int, default=2)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run folder for config/history/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--dataset", help=f"converted dataset folder (default ${DATA_ROOT_ENV})")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare metric reports")
    p.add_argument("--reports", nargs="*", default=[], help="metric report JSON files")
    p.add_argument("--out", required=True, help="folder for table.md/table.csv/pr_chart.png")
    p.add_argument("--qualitative", type=int, default=0,
                   help="also render a grid over N test samples")
    p.add_argument("--models", nargs="*", default=[],
                   help="checkpoints for the qualitative grid")
    p.add_argument("--dataset", help=f"dataset folder for the grid (default ${DATA_ROOT_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        return _fail(EXIT_USAGE, str(exc))
    except IoFailure as exc:
        return _fail(EXIT_IO, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())
