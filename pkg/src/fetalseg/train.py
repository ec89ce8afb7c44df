"""Dice loss, Adam training with best-validation selection, Dice evaluation and
the ablation / cross-validation harnesses."""
from __future__ import annotations

import copy
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .augment import AugmentationConfig, apply_pipeline
from .data import CLASS_NAMES, FOREGROUND, PLANE_CLASSES, Sample
from .model import ModelConfig, build_model, predict_mask

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
REPORT_FIELDS = ("test_set", "arm", "fraction", "fold", "class_name", "dice")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_epochs: int = 100
    augmentation: bool = True
    seed: int = 0
    augment_config: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augment_config, dict):
            self.augment_config = AugmentationConfig(**self.augment_config)
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def arm(self) -> str:
        return "da" if self.augmentation else "noda"


# -- losses and metrics

def one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    return F.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over classes of (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps),
    sums taken over batch and space. Background counts as a class here."""
    if probabilities.dim() != 4 or target.shape != (probabilities.shape[0], *probabilities.shape[2:]):
        raise ValueError(
            f"dice_loss: probabilities {tuple(probabilities.shape)} vs target {tuple(target.shape)}"
        )
    t = one_hot(target, probabilities.shape[1]).to(probabilities.dtype)
    inter = (probabilities * t).sum(dim=(0, 2, 3))
    denom = probabilities.sum(dim=(0, 2, 3)) + t.sum(dim=(0, 2, 3))
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def dice_coefficient(pred: np.ndarray, target: np.ndarray, class_id: int) -> float | None:
    """2|P & T| / (|P| + |T|); None when the class is absent from both."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    p = pred == class_id
    t = target == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return None
    return 2.0 * int((p & t).sum()) / total


# -- reports

@dataclass
class DiceReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, test_set: str, arm: str, fraction: float | str, fold: int | str, class_name: str, dice: float):
        self.rows.append(
            {"test_set": test_set, "arm": arm, "fraction": fraction, "fold": fold,
             "class_name": class_name, "dice": float(dice)}
        )

    def extend(self, other: "DiceReport") -> "DiceReport":
        self.rows.extend(other.rows)
        return self

    def filter(self, **kw) -> "DiceReport":
        return DiceReport([r for r in self.rows if all(str(r[k]) == str(v) for k, v in kw.items())])

    def per_class(self) -> dict[str, float]:
        return {r["class_name"]: r["dice"] for r in self.rows if r["class_name"] != "mean"}

    def mean(self) -> float:
        """The recorded ``mean`` row (asserts there is exactly one)."""
        means = [r["dice"] for r in self.rows if r["class_name"] == "mean"]
        if len(means) != 1:
            raise ValueError(f"expected one mean row, found {len(means)}")
        return means[0]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "dice": repr(float(r["dice"]))})

    @classmethod
    def read_csv(cls, path) -> "DiceReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for r in reader:
                r["dice"] = float(r["dice"])
                rows.append(r)
        return cls(rows)


def table1(report: DiceReport, model_name: str = "ours") -> dict:
    """Pivot mean Dice into {model: {(test_set, arm): dice}}, the layout of a
    per-test-set DA / w/o-DA benchmark table."""
    cells = {}
    for r in report.rows:
        if r["class_name"] == "mean":
            cells[(r["test_set"], r["arm"])] = r["dice"]
    return {model_name: dict(sorted(cells.items()))}


# -- batching

def _batch(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    # channels-last runs the CPU convolutions noticeably faster
    return x.to(torch.get_default_dtype()).contiguous(memory_format=torch.channels_last), y


Predictor = Callable[[Sequence[Sample]], np.ndarray]


def _predict(model: nn.Module | Predictor, samples: Sequence[Sample], batch_size: int = 4) -> np.ndarray:
    if not isinstance(model, nn.Module):
        return np.asarray(model(samples))
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = _batch(samples[i:i + batch_size])
            out.append(predict_mask(model(x)).numpy())
    return np.concatenate(out)


# -- evaluation

def evaluate(
    model: nn.Module | Predictor,
    samples: Sequence[Sample],
    test_set: str = "test",
    arm: str = "da",
    fraction: float | str = 1.0,
    fold: int | str = "",
) -> DiceReport:
    """Per-class Dice averaged over samples (only classes of each sample's
    plane, skipping both-empty cases), then the mean over classes."""
    if len(samples) == 0:
        raise ValueError("evaluate: no samples")
    preds = _predict(model, samples)
    scores: dict[int, list[float]] = defaultdict(list)
    for s, pred in zip(samples, preds):
        for c in sorted(PLANE_CLASSES[s.plane]):
            d = dice_coefficient(pred, s.mask, c)
            if d is not None:
                scores[c].append(d)
    report = DiceReport()
    per_class = []
    for c in FOREGROUND:
        if scores[c]:
            v = float(np.mean(scores[c]))
            per_class.append(v)
            report.add(test_set, arm, fraction, fold, CLASS_NAMES[c], v)
    report.add(test_set, arm, fraction, fold, "mean", float(np.mean(per_class)) if per_class else 0.0)
    return report


# -- training

@dataclass
class TrainResult:
    model: nn.Module
    log: list[dict]
    best_epoch: int
    best_val_loss: float
    audit: list[dict] = field(default_factory=list)

    @property
    def augmentation_draws(self) -> int:
        return sum(len(a["ops"]) for a in self.audit)

    def write_log(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def _mean_loss(model: nn.Module, samples: Sequence[Sample], batch_size: int) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = _batch(samples[i:i + batch_size])
            total += float(dice_loss(model(x), y)) * len(x)
            n += len(x)
    return total / n


def train(
    model: nn.Module,
    samples: Sequence[Sample],
    config: TrainConfig,
    val_samples: Sequence[Sample] | None = None,
    on_epoch_end: Callable[[int, nn.Module], bool] | None = None,
    on_step_end: Callable[[int, nn.Module], bool] | None = None,
) -> TrainResult:
    """Train with Adam on Dice loss; keep the weights with the lowest
    validation loss.

    Training and validation samples come from ``samples`` by their ``split``
    unless ``val_samples`` is given. ``on_epoch_end(epoch, model)`` and
    ``on_step_end(step, model)`` may return True to stop early; a stop inside
    an epoch still runs that epoch's validation.
    """
    if val_samples is None:
        train_set = [s for s in samples if s.split == "train"]
        val_set = [s for s in samples if s.split == "val"]
    else:
        train_set, val_set = list(samples), list(val_samples)
    if not train_set or not val_set:
        raise ValueError("train: need both training and validation samples")
    # denormals slow CPU kernels badly late in training; the flag is process
    # global, so it is only held for the duration of the loop
    torch.set_flush_denormal(True)
    try:
        return _fit(model, train_set, val_set, config, on_epoch_end, on_step_end)
    finally:
        torch.set_flush_denormal(False)


def _fit(model, train_set, val_set, config, on_epoch_end, on_step_end) -> TrainResult:
    model.to(memory_format=torch.channels_last)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps)
    keys = [f"{s.sample_id}#{i}" for i, s in enumerate(train_set)]
    history, audit = [], []
    best_state, best_loss, best_epoch = None, math.inf, -1
    step, stop = 0, False

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        model.train()
        losses = []
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            if len(idx) < 2 and config.batch_size > 1 and len(order) > 1:
                idx = order[b - 1:b + 1]  # avoid a single-image batch for batchnorm
            batch = []
            for i in idx:
                s = train_set[i]
                if config.augmentation:
                    s, rec = apply_pipeline(
                        _keyed(s, keys[i]), config.augment_config, config.seed, epoch
                    )
                    audit.append(rec)
                batch.append(s)
            x, y = _batch(batch)
            opt.zero_grad()
            where = (f"epoch {epoch}, batch {b // config.batch_size} "
                     f"({', '.join(s.sample_id for s in batch)})")
            try:
                loss = dice_loss(model(x), y)
            except T.NumericError as exc:
                raise T.NumericError(f"{exc} at {where}") from exc
            if not torch.isfinite(loss):
                raise T.NumericError(f"non-finite loss at {where}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if on_step_end is not None and on_step_end(step, model):
                stop = True
                break
        val_loss = _mean_loss(model, val_set, config.batch_size)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"], val_loss)
        if stop or (on_epoch_end is not None and on_epoch_end(epoch, model)):
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_loss, audit)


def _keyed(sample: Sample, key: str) -> Sample:
    return replace(sample, sample_id=key)


# -- experiment harnesses

def subsample_subjects(samples: Sequence[Sample], fraction: float, seed: int) -> list[Sample]:
    """Keep round(fraction * n_subjects) whole subjects, preserving order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    subjects = sorted({s.subject_id for s in samples})
    n = round(fraction * len(subjects))
    if n < 1:
        raise ValueError(f"fraction {fraction} keeps no subjects out of {len(subjects)}")
    if n == len(subjects):
        return list(samples)
    keep = set(np.array(subjects)[np.random.default_rng(seed).permutation(len(subjects))[:n]].tolist())
    return [s for s in samples if s.subject_id in keep]


def run_arm(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> TrainResult:
    model = build_model(model_config, train_config.seed)
    return train(model, train_samples, train_config, val_samples=val_samples)


def ablate_fractions(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    test_sets: Mapping[str, Sequence[Sample]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    fractions: Iterable[float] = (0.2, 0.4, 0.6, 0.8, 1.0),
    arms: Iterable[str] = ("da", "noda"),
    on_result: Callable[[float, str, TrainResult], None] | None = None,
) -> DiceReport:
    """One model per (fraction, arm), each evaluated on every test set."""
    report = DiceReport()
    for frac in fractions:
        subset = subsample_subjects(train_samples, frac, train_config.seed)
        for arm in arms:
            cfg = _with_arm(train_config, arm)
            result = run_arm(subset, val_samples, model_config, cfg)
            if on_result is not None:
                on_result(frac, arm, result)
            for name, test in test_sets.items():
                report.extend(evaluate(result.model, test, name, arm, frac, ""))
    return report


def _with_arm(config: TrainConfig, arm: str) -> TrainConfig:
    if arm not in ("da", "noda"):
        raise ValueError(f"arm must be da|noda, got {arm!r}")
    cfg = copy.copy(config)
    cfg.augmentation = arm == "da"
    return cfg


def kfold_subjects(samples: Sequence[Sample], k: int, seed: int) -> list[set[str]]:
    if k < 2:
        raise ValueError("k must be >= 2")
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot form {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return [set(np.array(subjects)[part].tolist()) for part in np.array_split(order, k)]


@dataclass
class CVResult:
    report: DiceReport
    fold_means: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_means))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_means))


def cross_validate(
    samples: Sequence[Sample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    test_sets: Mapping[str, Sequence[Sample]] | None = None,
) -> CVResult:
    """Subject-atomic k-fold CV. Each fold trains on the other k-1 folds,
    selects on its own fold and is scored on it (and on ``test_sets``)."""
    folds = kfold_subjects(samples, k, train_config.seed)
    report = DiceReport()
    fold_means = []
    arm = train_config.arm
    for i, held in enumerate(folds):
        tr = [s for s in samples if s.subject_id not in held]
        va = [s for s in samples if s.subject_id in held]
        result = run_arm(tr, va, model_config, train_config)
        fold_report = evaluate(result.model, va, "cv_val", arm, 1.0, i)
        fold_means.append(fold_report.mean())
        report.extend(fold_report)
        for name, test in (test_sets or {}).items():
            report.extend(evaluate(result.model, test, name, arm, 1.0, i))
    report.add("cv_val", arm, 1.0, "mean", "mean", float(np.mean(fold_means)))
    report.add("cv_val", arm, 1.0, "std", "mean", float(np.std(fold_means)))
    return CVResult(report, fold_means)
