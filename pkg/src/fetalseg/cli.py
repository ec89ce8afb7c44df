"""``fetalseg`` command line: phantom, augment, train, eval, ablate, cv, embed, report.

Every subcommand takes an optional JSON run config; explicit flags override
it. Outputs land in ``<out-dir>/<run-name>/`` together with ``produced.json``,
which lists every written file with its SHA-256 and the root seed.
Failures print one JSON line to stderr and exit 2 (bad input) or 3 (numeric).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import plots
from .augment import AugmentationConfig, apply_pipeline
from .data import (
    DataError,
    Manifest,
    balance_upsample,
    load_manifest_samples,
    load_profiles,
    phantom_generate,
    split_train_val,
    write_dataset,
)
from .embedding import EmbeddingConfig, cluster_metrics, embed_samples, export_plot, write_points_csv
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import NumericError
from .train import DiceReport, TrainConfig, ablate_fractions, cross_validate, evaluate, train

OUT_DIR_ENV = "FETALSEG_OUT_DIR"
EXIT_INVALID = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags, config or input files."""


# -- run config

@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    embedding: dict = field(default_factory=dict)
    manifests: dict = field(default_factory=dict)
    out_dir: str | None = None
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        aug = AugmentationConfig(**self.augmentation)
        return TrainConfig(**{**self.train, "seed": self.seed, "augment_config": aug})

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(**{**self.embedding, "seed": self.seed})


def _section(cls, skip=()) -> dict:
    return {
        "type": "object",
        "properties": {f.name: {} for f in fields(cls) if f.name not in skip},
        "additionalProperties": False,
    }


RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "model": _section(ModelConfig),
        "train": _section(TrainConfig, skip=("seed", "augment_config")),
        "augmentation": _section(AugmentationConfig),
        "embedding": _section(EmbeddingConfig, skip=("seed",)),
        "manifests": {
            "type": "object",
            "additionalProperties": {"type": "string"},
            "propertyNames": {"enum": ["dataset", "train", "test"]},
        },
        "out_dir": {"type": ["string", "null"]},
        "seed": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config {path}: {where}: {exc.message}") from exc
    cfg = RunConfig(**doc)
    # build every section once so bad values fail before any work starts
    try:
        cfg.model_config().validate()
        cfg.train_config()
        cfg.embedding_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    return cfg


# -- run directory bookkeeping

class Run:
    def __init__(self, args, config: RunConfig):
        base = args.out_dir or config.out_dir or os.environ.get(OUT_DIR_ENV) or "runs"
        name = args.run_name or f"{args.command}-{datetime.now():%Y%m%d-%H%M%S}"
        self.dir = Path(base) / name
        self.dir.mkdir(parents=True, exist_ok=True)
        self.seed = config.seed
        self.command = args.command
        self.files: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def finish(self) -> Path:
        entries = []
        for p in sorted(set(self.files)):
            if p.is_file():
                digest = hashlib.sha256(p.read_bytes()).hexdigest()
                entries.append({"path": p.relative_to(self.dir).as_posix(), "sha256": digest})
        out = self.dir / "produced.json"
        out.write_text(json.dumps({"command": self.command, "seed": self.seed, "files": entries},
                                  indent=2, sort_keys=True) + "\n")
        return out


# -- shared helpers

def _read_manifest(path) -> Manifest:
    if path is None:
        raise UsageError("a --manifest is required")
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return Manifest.read(path)


def _samples(manifest: Manifest, *splits: str):
    sel = manifest.select(*splits) if splits else manifest
    return load_manifest_samples(sel)


def _test_sets(manifest: Manifest, splits) -> dict:
    out = {}
    for split in splits:
        sel = manifest.select(split)
        if len(sel):
            out[split] = load_manifest_samples(sel)
    if not out:
        raise UsageError(f"manifest has no records in splits {', '.join(splits)}")
    return out


def _train_val(manifest: Manifest, balance: bool):
    if balance:
        manifest = balance_upsample(manifest)
    tr = _samples(manifest, "train")
    va = _samples(manifest, "val")
    if not tr or not va:
        raise UsageError("manifest needs both train and val records")
    return tr, va


# -- subcommands

def cmd_phantom(args, cfg: RunConfig, run: Run) -> dict:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    profiles = load_profiles(args.profiles)
    planes = ("TV", "TC") if args.plane == "both" else (args.plane,)
    devices = args.device or ["voluson_e8"]
    samples = []
    for dev in devices:
        for plane in planes:
            samples += phantom_generate(args.count, plane, dev, cfg.seed, profiles)
    for dev in args.test_device or []:
        for plane in planes:
            samples += phantom_generate(args.test_count or args.count, plane, dev, cfg.seed + 1,
                                        profiles, split="test1")
    manifest = write_dataset(samples, run.dir / "dataset")
    manifest = split_train_val(manifest, args.train_ratio, cfg.seed)
    for r in manifest.records:
        run.files += [manifest.resolve(r.image_path), manifest.resolve(r.mask_path)]
    manifest.write(run.path("dataset/manifest.csv"))
    return {"samples": len(samples), "manifest": str(run.dir / "dataset/manifest.csv")}


def cmd_augment(args, cfg: RunConfig, run: Run) -> dict:
    manifest = _read_manifest(args.manifest)
    samples = _samples(manifest, *args.split) if args.split else _samples(manifest)
    if args.limit is not None:
        samples = samples[: args.limit]
    aug = AugmentationConfig(**cfg.augmentation)
    outputs, audit = [], []
    for s in samples:
        out, rec = apply_pipeline(s, aug, cfg.seed, args.epoch)
        outputs.append(out)
        audit.append(rec)
    out_manifest = write_dataset(outputs, run.dir / "augmented")
    for r in out_manifest.records:
        run.files += [out_manifest.resolve(r.image_path), out_manifest.resolve(r.mask_path)]
    out_manifest.write(run.path("augmented/manifest.csv"))
    run.write_json("augmented/audit.json", {"seed": cfg.seed, "epoch": args.epoch, "records": audit})
    return {"samples": len(outputs)}


def cmd_train(args, cfg: RunConfig, run: Run) -> dict:
    manifest = _read_manifest(args.manifest)
    tcfg = cfg.train_config()
    tcfg.augmentation = args.arm == "da" if args.arm else tcfg.augmentation
    mcfg = cfg.model_config()
    mcfg.validate()
    tr, va = _train_val(manifest, args.balance)
    result = train(build_model(mcfg, cfg.seed), tr, tcfg, val_samples=va)
    result.write_log(run.path("train_log.csv"))
    save_checkpoint(run.path("model.ckpt"), result.model, seed=cfg.seed, step=result.best_epoch,
                    val_loss=result.best_val_loss, extra={"arm": tcfg.arm})
    return {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
            "checkpoint": str(run.dir / "model.ckpt")}


def cmd_eval(args, cfg: RunConfig, run: Run) -> dict:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        model, header = load_checkpoint(args.checkpoint)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad checkpoint {args.checkpoint}: {exc}") from exc
    model.eval()
    manifest = _read_manifest(args.manifest)
    arm = args.arm or header.get("arm", "da")
    report = DiceReport()
    for name, samples in _test_sets(manifest, args.split).items():
        report.extend(evaluate(model, samples, name, arm, 1.0, ""))
    report.write_csv(run.path("dice_report.csv"))
    return {"mean": {k: report.filter(test_set=k).mean() for k in dict.fromkeys(r["test_set"] for r in report.rows)}}


def cmd_ablate(args, cfg: RunConfig, run: Run) -> dict:
    manifest = _read_manifest(args.manifest)
    tcfg = cfg.train_config()
    mcfg = cfg.model_config()
    mcfg.validate()
    tr, va = _train_val(manifest, args.balance)
    tests = _test_sets(manifest, args.split)

    def save(frac, arm, result):
        result.write_log(run.path(f"logs/{arm}_{frac:g}.csv"))

    report = ablate_fractions(tr, va, tests, mcfg, tcfg, args.fractions, args.arms, on_result=save)
    report.write_csv(run.path("ablation.csv"))
    plots.fraction_curves(report.rows, run.path("ablation.svg"))
    return {"rows": len(report.rows)}


def cmd_cv(args, cfg: RunConfig, run: Run) -> dict:
    manifest = _read_manifest(args.manifest)
    tcfg = cfg.train_config()
    tcfg.augmentation = args.arm == "da" if args.arm else tcfg.augmentation
    mcfg = cfg.model_config()
    mcfg.validate()
    pool = _samples(manifest, "train", "val")
    tests = _test_sets(manifest, args.split) if any(len(manifest.select(s)) for s in args.split) else None
    result = cross_validate(pool, mcfg, tcfg, args.folds, tests)
    result.report.write_csv(run.path("cv_report.csv"))
    return {"mean": result.mean, "std": result.std}


def cmd_embed(args, cfg: RunConfig, run: Run) -> dict:
    manifest = _read_manifest(args.manifest)
    samples = _samples(manifest, *args.split) if args.split else _samples(manifest)
    if args.plane:
        samples = [s for s in samples if s.plane == args.plane.upper()]
    if not samples:
        raise UsageError("no samples to embed")
    points = embed_samples(samples, cfg.embedding_config())
    write_points_csv(points, _external(run, args.out_csv, "embedding.csv"))
    export_plot(points, _external(run, args.out_svg, "embedding.svg"))
    metrics = {}
    for plane in sorted({p.plane for p in points}):
        metrics[plane] = cluster_metrics([p for p in points if p.plane == plane])
    run.write_json("embedding_metrics.json", {"seed": cfg.seed, "metrics": metrics})
    return metrics


def _external(run: Run, path, default: str) -> Path:
    if path is None:
        return run.path(default)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_report(args, cfg: RunConfig, run: Run) -> dict:
    report = DiceReport()
    for path in args.csv:
        if not Path(path).is_file():
            raise UsageError(f"report csv not found: {path}")
        try:
            report.extend(DiceReport.read_csv(path))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad report csv {path}: {exc}") from exc
    plots.dice_bars(report.rows, run.path("dice_bars.svg"))
    plots.dice_radial(report.rows, run.path("dice_radial.svg"))
    if len({r["fraction"] for r in report.rows}) > 1:
        plots.fraction_curves(report.rows, run.path("fractions.svg"))
    return {"rows": len(report.rows)}


COMMANDS = {
    "phantom": cmd_phantom,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cv": cmd_cv,
    "embed": cmd_embed,
    "report": cmd_report,
}

TEST_SPLITS = ["test1", "test2", "test3", "test4"]


# -- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction {text} not in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="JSON run config; explicit flags override its values")
    g.add_argument("--out-dir", help=f"output root (default: ${OUT_DIR_ENV} or ./runs)")
    g.add_argument("--run-name", help="run directory name (default: <command>-<timestamp>)")
    g.add_argument("--seed", type=int, help="root seed for every random stream (default 0)")
    g.add_argument("--threads", type=int, help="cap on torch worker threads")

    def train_flags(p, arm=True):
        p.add_argument("--manifest", help="manifest CSV with train/val (and test) records")
        p.add_argument("--epochs", type=int, help="training epochs per model")
        p.add_argument("--scale", type=float, help="channel-width multiplier of the network")
        p.add_argument("--lr", type=float, help="Adam learning rate")
        p.add_argument("--batch-size", type=int, help="mini-batch size")
        p.add_argument("--balance", action="store_true", help="upsample training records per device")
        if arm:
            p.add_argument("--arm", choices=("da", "noda"), help="train with or without augmentation")

    parser = _Parser(prog="fetalseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom dataset")
    p.add_argument("--count", type=int, default=8, help="samples per (plane, device)")
    p.add_argument("--plane", choices=("TV", "TC", "both"), default="both", help="plane(s) to render")
    p.add_argument("--device", action="append", help="device profile for train/val data (repeatable)")
    p.add_argument("--test-device", action="append", help="device profile for test1 data (repeatable)")
    p.add_argument("--test-count", type=int, help="test samples per (plane, device); default --count")
    p.add_argument("--train-ratio", type=float, default=0.897, help="share of samples assigned to train")
    p.add_argument("--profiles", help="JSON file of device profiles (default: built-in set)")

    p = sub.add_parser("augment", parents=[common], help="apply the augmentation pipeline once")
    p.add_argument("--manifest", help="input manifest CSV")
    p.add_argument("--split", action="append", help="only these splits (repeatable)")
    p.add_argument("--epoch", type=int, default=0, help="epoch index fed to the augmentation stream")
    p.add_argument("--limit", type=int, help="augment at most this many samples")

    p = sub.add_parser("train", parents=[common], help="train one model")
    train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint per structure")
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--manifest", help="manifest CSV holding the test splits")
    p.add_argument("--split", action="append", help=f"test splits to score (default {','.join(TEST_SPLITS)})")
    p.add_argument("--arm", choices=("da", "noda"), help="arm label for the report (default: from checkpoint)")

    p = sub.add_parser("ablate", parents=[common], help="training-fraction ablation")
    train_flags(p, arm=False)
    p.add_argument("--fractions", type=_fraction, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0],
                   help="training fractions")
    p.add_argument("--arms", nargs="+", choices=("da", "noda"), default=["da", "noda"], help="arms to train")
    p.add_argument("--split", action="append", help=f"test splits to score (default {','.join(TEST_SPLITS)})")

    p = sub.add_parser("cv", parents=[common], help="subject-wise k-fold cross-validation")
    train_flags(p)
    p.add_argument("--folds", type=int, default=5, help="number of folds")
    p.add_argument("--split", action="append", help="extra test splits scored by every fold")

    p = sub.add_parser("embed", parents=[common], help="2-D embedding of images by device")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--split", action="append", help="only these splits (repeatable)")
    p.add_argument("--neighbors", type=int, help="k of the neighbor graph")
    p.add_argument("--min-dist", type=float, help="minimum spacing in the layout")
    p.add_argument("--epochs", type=int, help="layout optimization epochs")
    p.add_argument("--plane", choices=("tv", "tc"), type=str.lower, help="embed only this plane")
    p.add_argument("--out-svg", help="scatter plot path (default: <run>/embedding.svg)")
    p.add_argument("--out-csv", help="points CSV path (default: <run>/embedding.csv)")

    p = sub.add_parser("report", parents=[common], help="render Dice report CSVs as SVG charts")
    p.add_argument("--csv", nargs="+", required=True, help="Dice report CSV file(s)")
    return parser


def _merge(args, cfg: RunConfig) -> RunConfig:
    """Flags win over config values."""
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.seed < 0:
        raise UsageError("--seed must be non-negative")
    for flag, section, key in (
        ("epochs", "train", "max_epochs"), ("lr", "train", "learning_rate"),
        ("batch_size", "train", "batch_size"), ("scale", "model", "scale"),
    ):
        if getattr(args, flag, None) is not None and not (args.command == "embed" and flag == "epochs"):
            getattr(cfg, section)[key] = getattr(args, flag)
    if args.command == "embed":
        for flag, key in (("neighbors", "n_neighbors"), ("min_dist", "min_dist"), ("epochs", "epochs")):
            if getattr(args, flag) is not None:
                cfg.embedding[key] = getattr(args, flag)
    if getattr(args, "manifest", None) is None and "dataset" in cfg.manifests:
        args.manifest = cfg.manifests["dataset"]
    if args.command in ("eval", "ablate") and not args.split:
        args.split = list(TEST_SPLITS)
    if args.command == "cv" and not args.split:
        args.split = list(TEST_SPLITS)
    try:
        cfg.model_config().validate()
        cfg.train_config()
        cfg.embedding_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"status": "error", "code": code, "kind": kind, "message": " ".join(message.split())}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args.config) if args.config else RunConfig()
        cfg = _merge(args, cfg)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            torch.set_num_threads(args.threads)
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % 2**32)
        run = Run(args, cfg)
        run.write_json("run_config.json", asdict(cfg))
        summary = COMMANDS[args.command](args, cfg, run)
        produced = run.finish()
    except UsageError as exc:
        return _fail(EXIT_INVALID, "invalid_input", str(exc))
    except (DataError, FileNotFoundError, jsonschema.ValidationError) as exc:
        return _fail(EXIT_INVALID, "invalid_input", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", str(exc))
    except ValueError as exc:
        return _fail(EXIT_INVALID, "invalid_input", str(exc))
    print(json.dumps({"status": "ok", "command": args.command, "run_dir": str(run.dir),
                      "produced": str(produced), "summary": summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
