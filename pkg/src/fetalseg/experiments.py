"""Desk-scale experiments on phantoms: the overfit probe, the cross-device
augmentation comparison and the device-variance embedding."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import phantom_generate
from .embedding import (
    EmbeddingConfig,
    cluster_metrics,
    embed_features,
    embedding_trustworthiness,
    image_features,
)
from .model import ModelConfig, build_model
from .train import TrainConfig, _batch, dice_loss, evaluate, train


@dataclass
class ProbeResult:
    reached: bool
    epochs: int
    dice: float
    seconds: float
    log: list


def overfit_probe(
    seed: int = 0, n_samples: int = 8, scale: float = 1 / 8, max_epochs: int = 500,
    target: float = 0.95, check_every: int = 10, device: str = "voluson_e8",
) -> ProbeResult:
    """Fit a small model to a handful of phantoms (half TV, half TC) and stop
    once the training-set mean foreground Dice clears ``target``."""
    samples = probe_samples(seed, n_samples, device)
    model = build_model(ModelConfig(scale=scale), seed)
    cfg = TrainConfig(max_epochs=max_epochs, augmentation=False, seed=seed)
    state = {"dice": 0.0, "epoch": max_epochs}
    start = time.perf_counter()

    def check(epoch, m):
        if (epoch + 1) % check_every:
            return False
        state["dice"] = evaluate(m, samples).mean()
        m.train()
        if state["dice"] > target:
            state["epoch"] = epoch + 1
            return True
        return False

    result = train(model, samples, cfg, val_samples=samples, on_epoch_end=check)
    # the returned weights are the best-validation snapshot; score those
    final = evaluate(result.model, samples).mean()
    return ProbeResult(final > target, state["epoch"], final, time.perf_counter() - start, result.log)


def probe_samples(seed: int, n_samples: int = 8, device: str = "voluson_e8"):
    half = n_samples // 2
    return phantom_generate(half, "TV", device, seed) + phantom_generate(n_samples - half, "TC", device, seed)


def probe_loss_trace(seed: int, steps: int = 50, n_samples: int = 8, scale: float = 1 / 8) -> list[float]:
    """Dice loss on the whole probe set after each of the first ``steps``
    Adam updates, using batch statistics and leaving running stats alone."""
    samples = probe_samples(seed, n_samples)
    model = build_model(ModelConfig(scale=scale), seed)
    cfg = TrainConfig(augmentation=False, seed=seed)
    x_all, y_all = _batch(samples)
    trace = []

    def full_loss():
        buffers = {k: v.clone() for k, v in model.named_buffers()}
        model.train()
        with torch.no_grad():
            value = float(dice_loss(model(x_all), y_all))
        for k, v in model.named_buffers():
            v.copy_(buffers[k])
        return value

    def record(_, m):
        trace.append(full_loss())
        return len(trace) > steps

    trace.append(full_loss())
    train(model, samples, cfg, val_samples=samples[:1], on_step_end=record)
    return trace


def device_shift_sets(seed: int, train_device: str, test_device: str, n_train: int, n_val: int, n_test: int):
    """Phantom train/val sets from one device profile and a test set from another."""
    def both_planes(n, device, s, split):
        return (phantom_generate(n - n // 2, "TV", device, s, split=split)
                + phantom_generate(n // 2, "TC", device, s, split=split))

    return (
        both_planes(n_train, train_device, seed, "train"),
        both_planes(n_val, train_device, seed + 10_000, "val"),
        both_planes(n_test, test_device, seed + 20_000, "test1"),
    )


def da_generalization(
    seed: int, train_device: str = "voluson_e8", test_device: str = "voluson_p8",
    n_train: int = 12, n_val: int = 4, n_test: int = 8, epochs: int = 40, scale: float = 1 / 8,
) -> dict:
    """Train the same seeded model with and without augmentation on one
    device and score both on another."""
    tr, va, te = device_shift_sets(seed, train_device, test_device, n_train, n_val, n_test)
    out = {}
    for arm in ("da", "noda"):
        cfg = TrainConfig(max_epochs=epochs, augmentation=arm == "da", seed=seed)
        result = train(build_model(ModelConfig(scale=scale), seed), tr, cfg, val_samples=va)
        out[arm] = evaluate(result.model, te, "test1", arm).mean()
    return out


def device_embedding(devices=("voluson_e8", "hera_w10", "voluson_p8"), n_per_device: int = 40,
                     plane: str = "TV", seed: int = 0, config: EmbeddingConfig | None = None) -> dict:
    config = config or EmbeddingConfig(seed=seed)
    samples = [s for d in devices for s in phantom_generate(n_per_device, plane, d, seed)]
    feats = image_features(samples)
    coords = embed_features(feats, config)
    metrics = cluster_metrics(coords, [s.device for s in samples])
    metrics["trustworthiness"] = embedding_trustworthiness(feats, coords, 10)
    return metrics


def two_blobs(seed: int, n: int = 50, dim: int = 100, spread: float = 1.0, separation: float = 10.0):
    """Two Gaussian blobs whose centers sit ``separation`` intra-blob spreads apart."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    # intra-blob spread = RMS distance of a point from its center
    sd = spread / np.sqrt(dim)
    a = rng.normal(0, sd, size=(n, dim))
    b = rng.normal(0, sd, size=(n, dim)) + separation * spread * direction
    return np.vstack([a, b]), np.array([0] * n + [1] * n)


def two_blob_benchmark(seed: int, config: EmbeddingConfig | None = None) -> dict:
    x, labels = two_blobs(seed)
    config = config or EmbeddingConfig(seed=seed)
    coords = embed_features(x, config)
    metrics = cluster_metrics(coords, labels.astype(str))
    metrics["trustworthiness"] = embedding_trustworthiness(x, coords, 10)
    return metrics
