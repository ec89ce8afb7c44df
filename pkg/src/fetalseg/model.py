"""Inception-A U-Net for 11-class fetal brain segmentation, plus a plain U-Net
comparator and the binary checkpoint format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import tensor as T

NUM_CLASSES = 11
INPUT_SHAPE = (1, 160, 288)


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    levels: int = 4
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512)
    latent_channels: int = 512
    num_classes: int = NUM_CLASSES
    scale: float = 1.0
    # width of the 1x1 reductions and inner 3x3 convs of an Inception block,
    # as a multiple of the block's output width
    inception_inner: float = 2.0
    arch: str = "inception"  # "inception" | "unet"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.encoder_channels = tuple(self.encoder_channels)

    def widths(self) -> tuple[list[int], int]:
        enc = [_scaled(c, self.scale) for c in self.encoder_channels]
        return enc, _scaled(self.latent_channels, self.scale)

    def validate(self) -> None:
        if self.levels != len(self.encoder_channels):
            raise ValueError("levels must match len(encoder_channels)")
        if self.arch not in ("inception", "unet"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        enc, lat = self.widths()
        for w in enc + [lat]:
            if w % 4:
                raise ValueError(f"scaled width {w} not divisible by 4 (scale={self.scale})")
        _, h, w = self.input_shape
        if h % 2**self.levels or w % 2**self.levels:
            raise ValueError(f"input {h}x{w} not divisible by 2^{self.levels}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _scaled(c: int, scale: float) -> int:
    w = c * scale
    if abs(w - round(w)) > 1e-9:
        raise ValueError(f"width {c} * scale {scale} is not an integer")
    return int(round(w))


class ConvBNReLU(nn.Module):
    """conv -> batchnorm -> relu, stride 1, same padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int):
        super().__init__()
        self.padding = T.same_padding(kernel_size)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, padding=self.padding)
        self.bn = nn.BatchNorm2d(out_ch, eps=1e-5, momentum=0.1)

    def forward(self, x):
        x = T.conv2d(x, T.ConvParams(self.conv.weight, self.conv.bias, 1, self.padding))
        bn = self.bn
        x = T.batchnorm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias, self.training)
        return T.relu(x)


class InceptionA(nn.Module):
    """Four parallel branches, each emitting out_ch/4 channels:
    pool->1x1, 1x1, 1x1->3x3, 1x1->3x3->3x3."""

    def __init__(self, in_ch: int, out_ch: int, inner: int | None = None):
        super().__init__()
        if out_ch % 4:
            raise ValueError(f"out_ch {out_ch} not divisible by 4")
        b = out_ch // 4
        inner = inner or b
        self.branch_pool = ConvBNReLU(in_ch, b, 1)
        self.branch1x1 = ConvBNReLU(in_ch, b, 1)
        self.branch3x3 = nn.Sequential(ConvBNReLU(in_ch, inner, 1), ConvBNReLU(inner, b, 3))
        self.branch3x3dbl = nn.Sequential(
            ConvBNReLU(in_ch, inner, 1), ConvBNReLU(inner, inner, 3), ConvBNReLU(inner, b, 3)
        )

    def forward(self, x):
        return T.concat_channels(
            [self.branch_pool(T.avgpool3_s1(x)), self.branch1x1(x), self.branch3x3(x), self.branch3x3dbl(x)]
        )


class StandardBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(ConvBNReLU(in_ch, out_ch, 3), ConvBNReLU(out_ch, out_ch, 3))


class SegmentationNet(nn.Module):
    """U-shaped network: encoder blocks with 2x max pooling, a latent block,
    bilinear-upsampling decoder with concatenated skips, 1x1 softmax head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        enc, lat = config.widths()
        in_ch = config.input_shape[0]

        def encoder_block(i, o):
            if config.arch == "unet":
                return StandardBlock(i, o)
            return InceptionA(i, o, _scaled_inner(o, config.inception_inner))

        self.encoder = nn.ModuleList()
        prev = in_ch
        for w in enc:
            self.encoder.append(encoder_block(prev, w))
            prev = w
        self.latent = encoder_block(prev, lat)
        prev = lat
        self.decoder = nn.ModuleList()
        for skip in reversed(enc):
            self.decoder.append(StandardBlock(prev + skip, skip))
            prev = skip
        self.head = nn.Conv2d(prev, config.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        c, h, w = self.config.input_shape
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] % 2**self.config.levels or x.shape[3] % 2**self.config.levels:
            raise ValueError(f"bad input shape {tuple(x.shape)}; expected [N,{c},{h},{w}]")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = T.maxpool2(x)
        x = self.latent(x)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(T.concat_channels([T.upsample_bilinear2x(x), skip]))
        return T.conv2d(x, T.ConvParams(self.head.weight, self.head.bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return T.softmax_channels(self.logits(x))

    def encoder_shapes(self, x: torch.Tensor) -> list[tuple[int, ...]]:
        """Pooled output shape of every encoder level (for shape checks)."""
        shapes = []
        for block in self.encoder:
            x = T.maxpool2(block(x))
            shapes.append(tuple(x.shape))
        return shapes


def _scaled_inner(out_ch: int, factor: float) -> int:
    return max(1, int(round(out_ch * factor)))


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationNet:
    """Build the network with He-normal conv weights and zero biases."""
    gen = torch.Generator().manual_seed(seed)
    # allocate without torch's default init; every tensor is set below
    with torch.device("meta"):
        model = SegmentationNet(config)
    model = model.to_empty(device="cpu")
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return model


def forward(model: nn.Module, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(batch)
    return model(batch)


def predict_mask(probabilities: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    if probabilities.dim() != 4:
        raise ValueError("expected [N,C,H,W] probabilities")
    # torch.argmax does not promise first-index on ties, so resolve explicitly
    best = probabilities.max(dim=1, keepdim=True).values
    hit = probabilities == best
    idx = torch.arange(probabilities.shape[1]).view(1, -1, 1, 1)
    return torch.where(hit, idx, probabilities.shape[1]).min(dim=1).values


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_count(config: ModelConfig) -> int:
    """Trainable parameters of the architecture, without allocating weights."""
    config.validate()
    with torch.device("meta"):
        return count_parameters(SegmentationNet(config))


# -- checkpoint: 8-byte little-endian header length, UTF-8 JSON header, then
# float32 LE blobs for every state_dict entry in declaration order.
_MAGIC = b"FSEGCKPT"


def save_checkpoint(path, model: SegmentationNet, *, seed: int, step: int, val_loss: float | None,
                    extra: dict | None = None) -> None:
    state = model.state_dict()
    tensors = []
    for name, t in state.items():
        tensors.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")})
    header = {
        "config": asdict(model.config),
        "seed": seed,
        "step": step,
        "val_loss": val_loss,
        "tensors": tensors,
    }
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for t in state.values():
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[SegmentationNet, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    offset = 16 + n
    model = SegmentationNet(ModelConfig.from_dict(header["config"]))
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += 4 * count
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32)).to(getattr(torch, entry["dtype"]))
    model.load_state_dict(state)
    return model, header
