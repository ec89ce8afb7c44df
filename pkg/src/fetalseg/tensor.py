"""Functional tensor ops used by the segmentation network.

All ops take and return ``torch.Tensor`` and are differentiable through torch's
reverse-mode autograd. This module pins the conventions the network relies on
(half-pixel bilinear upsampling, in-bounds average pooling, first-index max-pool
ties) and validates shapes and finiteness at every call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


def set_precision(double: bool) -> None:
    """Switch the default float dtype (float64 for gradient checks)."""
    torch.set_default_dtype(torch.float64 if double else torch.float32)


def _check_4d(x: torch.Tensor, name: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{name}: expected a 4-D tensor [N,C,H,W], got shape {tuple(x.shape)}")


def _finite(out: torch.Tensor, name: str) -> torch.Tensor:
    # a NaN/Inf anywhere poisons the sum; only then pay for the elementwise scan
    with torch.no_grad():
        total = out.sum()
    if not torch.isfinite(total) and not torch.isfinite(out).all():
        raise NumericError(f"{name}: non-finite values in output")
    return out


@dataclass
class ConvParams:
    weight: torch.Tensor  # (out_ch, in_ch, kh, kw)
    bias: torch.Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.dim() != 4 or self.weight.shape[0] < 1:
            raise ValueError(f"conv weight must be (out,in,kh,kw), got {tuple(self.weight.shape)}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must have shape (out_ch,)")


def conv2d(x: torch.Tensor, params: ConvParams) -> torch.Tensor:
    """Cross-correlation plus bias; output size floor((H+2p-kh)/s)+1."""
    _check_4d(x, "conv2d")
    w = params.weight
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * params.padding < kh or x.shape[3] + 2 * params.padding < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    out = F.conv2d(x, w, params.bias, stride=params.stride, padding=params.padding)
    return _finite(out, "conv2d")


def same_padding(kernel_size: int) -> int:
    if kernel_size % 2 != 1:
        raise ValueError("same padding needs an odd kernel")
    return kernel_size // 2


def maxpool2(x: torch.Tensor) -> torch.Tensor:
    """2x2 max pooling with stride 2. Gradient goes to the first maximum in
    row-major window order."""
    _check_4d(x, "maxpool2")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    # torch's CPU kernel keeps the first maximum in scan order (strict > test)
    out = F.max_pool2d(x, 2, stride=2)
    return _finite(out, "maxpool2")


def upsample_bilinear2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling with half-pixel centers (no corner alignment)."""
    _check_4d(x, "upsample_bilinear2x")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError("upsample_bilinear2x: empty spatial dims")
    out = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return _finite(out, "upsample_bilinear2x")


def avgpool3_s1(x: torch.Tensor) -> torch.Tensor:
    """3x3 mean, stride 1, padding 1; border windows average in-bounds pixels only."""
    _check_4d(x, "avgpool3_s1")
    out = F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)
    return _finite(out, "avgpool3_s1")


def batchnorm(
    x: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    weight: torch.Tensor | None,
    bias: torch.Tensor | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-channel batch normalization. Training mode normalizes with batch
    statistics and updates the running estimates in place."""
    _check_4d(x, "batchnorm")
    n, _, h, w = x.shape
    if training and n * h * w < 2:
        raise ValueError("batchnorm: train mode needs at least 2 values per channel")
    out = F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)
    return _finite(out, "batchnorm")


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def concat_channels(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    if not tensors:
        raise ValueError("concat_channels: nothing to concatenate")
    ref = tensors[0]
    for t in tensors:
        _check_4d(t, "concat_channels")
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError(
                f"concat_channels: shape mismatch {tuple(ref.shape)} vs {tuple(t.shape)}"
            )
    return torch.cat(list(tensors), dim=1)


def softmax_channels(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x, "softmax_channels")
    return _finite(torch.softmax(x, dim=1), "softmax_channels")


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central finite differences.

    ``fn`` is reduced to a scalar through a fixed random projection of its
    output. Each checked entry's relative error is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-3 * max|n|``, so entries
    whose true gradient is numerically zero do not dominate the report.
    ``max_entries`` subsamples coordinates per input (seeded) for big tensors.
    Failures are reported, not raised.
    """
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    with torch.no_grad():
        probe = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (fn(*args).double() * proj).sum()

    value = scalar(*inputs)
    analytic = torch.autograd.grad(value, inputs, allow_unused=True)

    rng = np.random.default_rng(seed)
    abs_errs, rel_errs, count = [], [], 0
    for tensor, grad in zip(inputs, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = rng.choice(flat.numel(), size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = scalar(*inputs).item()
                flat[i] = orig - step
                minus = scalar(*inputs).item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * step)
        a = grad.detach().reshape(-1).numpy()[idx]
        floor = 1e-3 * np.abs(numeric).max() + 1e-12
        diff = np.abs(a - numeric)
        abs_errs.append(diff.max(initial=0.0))
        rel_errs.append((diff / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)).max(initial=0.0))
        count += len(idx)
    return GradCheckReport(float(max(rel_errs)), float(max(abs_errs)), count)
