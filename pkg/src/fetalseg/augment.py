"""Online augmentation for fetal head ultrasound.

Photometric ops take and return a float image in [0, 1]. Geometric ops warp the
image (bilinear, zero fill) and the class mask (nearest, background fill) with
one shared coordinate map. ``apply_pipeline`` draws activations and parameters
from a generator keyed on (seed, sample_id, epoch) and returns an audit record
of everything it drew.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage, signal
from skimage.draw import line as draw_line

from .data import CRANIUM, Sample

OPS = ("affine", "elastic", "shadow", "motion_blur", "quality", "color_jitter", "speckle")

SHADOW_STRENGTH = 0.8
SHADOW_BLUR_SIGMA = 8.0
SHADOW_BLUR_TRUNCATE = 3.0


@dataclass
class AugmentationConfig:
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    quality_reduction_range: tuple[float, float] = (0.0, 0.5)
    speckle_std: float = 0.1
    shadow_width_px: tuple[float, float] = (75.0, 100.0)
    shadow_angle_deg: tuple[float, float] = (15.0, 20.0)
    affine_zoom: tuple[float, float] = (0.6, 1.2)
    affine_rotate_deg: tuple[float, float] = (-20.0, 20.0)
    affine_translate_px: tuple[float, float] = (40.0, 60.0)
    affine_shear: tuple[float, float] = (0.0, 0.2)
    motion_blur_kernel: int = 50
    elastic_sigma: float = 50.0
    elastic_alpha_affine: float = 50.0
    per_op_probability: dict[str, float] = field(default_factory=lambda: {op: 0.5 for op in OPS})

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "quality_reduction_range", "shadow_width_px",
                     "shadow_angle_deg", "affine_zoom", "affine_rotate_deg", "affine_translate_px",
                     "affine_shear"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        probs = {op: 0.5 for op in OPS}
        probs.update(self.per_op_probability)
        self.per_op_probability = probs
        self.validate()

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if name.endswith(("_range", "_px", "_deg", "_zoom", "_shear")) and isinstance(value, (tuple, list)):
                lo, hi = value
                if lo > hi:
                    raise ValueError(f"{name}: low {lo} > high {hi}")
        unknown = set(self.per_op_probability) - set(OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        for op, p in self.per_op_probability.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {op} must be in [0,1], got {p}")
        if self.quality_reduction_range[0] < 0 or self.quality_reduction_range[1] >= 1:
            raise ValueError("quality_reduction_range must lie in [0, 1)")
        if self.motion_blur_kernel < 1 or self.speckle_std < 0:
            raise ValueError("motion_blur_kernel must be >= 1 and speckle_std >= 0")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(per_op_probability={op: 0.0 for op in OPS})


# -- photometric

def color_jitter(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    mean = float(image.mean())
    out = np.clip(contrast * (image - mean) + mean, 0.0, 1.0) * brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def quality_reduction(image: np.ndarray, severity: float) -> np.ndarray:
    """Downsample by (1 - severity) with antialiased bilinear filtering, then
    bilinearly resample back to the original size."""
    if not 0.0 <= severity < 1.0:
        raise ValueError(f"severity must be in [0, 1), got {severity}")
    if severity == 0.0:
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    small = F.interpolate(t, size=reduced_size(image.shape, severity), mode="bilinear",
                          align_corners=False, antialias=True)
    out = F.interpolate(small, size=image.shape, mode="bilinear", align_corners=False)
    return np.clip(out[0, 0].numpy(), 0.0, 1.0)


def reduced_size(shape: tuple[int, int], severity: float) -> tuple[int, int]:
    h, w = shape
    return max(1, round(h * (1 - severity))), max(1, round(w * (1 - severity)))


def speckle_noise(image: np.ndarray, rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    noise = rng.normal(0.0, std, size=image.shape)
    return np.clip(image * (1.0 + noise), 0.0, 1.0).astype(np.float32)


def motion_blur_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized 1-px line of ``length`` pixels through the kernel center."""
    k = np.zeros((length, length), dtype=np.float64)
    c = (length - 1) / 2
    r = (length - 1) / 2
    dy, dx = -math.sin(math.radians(angle_deg)), math.cos(math.radians(angle_deg))
    r0, c0 = int(np.floor(c - r * dy + 0.5)), int(np.floor(c - r * dx + 0.5))
    r1, c1 = int(np.floor(c + r * dy + 0.5)), int(np.floor(c + r * dx + 0.5))
    rr, cc = draw_line(r0, c0, r1, c1)
    k[rr, cc] = 1.0
    return k / k.sum()


def motion_blur(image: np.ndarray, angle_deg: float, length: int = 50) -> np.ndarray:
    kernel = motion_blur_kernel(length, angle_deg)
    before = length // 2
    after = length - 1 - before
    padded = np.pad(image.astype(np.float64), ((before, after), (before, after)), mode="symmetric")
    out = signal.fftconvolve(padded, kernel[::-1, ::-1], mode="valid")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- acoustic shadows

def cranium_extremities(mask: np.ndarray) -> tuple[tuple[int, int], tuple[int, int]] | None:
    """Leftmost and rightmost cranium pixels as (row, col); the row is the
    median row among cranium pixels in that extreme column. None if absent."""
    rows, cols = np.nonzero(mask == CRANIUM)
    if rows.size == 0:
        return None
    out = []
    for col in (cols.min(), cols.max()):
        r = np.sort(rows[cols == col])
        out.append((int(r[(r.size - 1) // 2]), int(col)))  # lower median
    return out[0], out[1]


def shadow_direction(angle_deg: float, side: int) -> tuple[float, float]:
    """Unit (drow, dcol) pointing down and away from the head; ``side`` is -1
    for the left extremity, +1 for the right."""
    a = math.radians(angle_deg)
    return math.cos(a), side * math.sin(a)


def shadow_footprint(shape, anchor, width: float, angle_deg: float, side: int) -> np.ndarray:
    """Half-infinite band of ``width`` px whose axis starts at ``anchor``."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dr, dc = shadow_direction(angle_deg, side)
    pr, pc = rr - anchor[0], cc - anchor[1]
    along = pr * dr + pc * dc
    across = -pr * dc + pc * dr
    return (along >= 0) & (np.abs(across) <= width / 2)


def _radial_blur(field: np.ndarray, sigma: float, truncate: float) -> np.ndarray:
    """Gaussian blur cut off on a disk of radius ``truncate * sigma``.

    Unlike a separable filter, nothing leaks past that Euclidean radius.
    """
    r = int(truncate * sigma)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    kernel = np.exp(-(yy**2 + xx**2) / (2 * sigma**2)) * (yy**2 + xx**2 <= (truncate * sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(field, r, mode="edge")
    out = signal.fftconvolve(padded, kernel, mode="valid")
    out[np.abs(out) < 1e-12] = 0.0  # FFT round-off
    return np.clip(out, 0.0, 1.0)


def acoustic_shadow(
    image: np.ndarray,
    mask: np.ndarray,
    widths: tuple[float, float],
    angles_deg: tuple[float, float],
) -> tuple[np.ndarray, dict | None]:
    """Darken two blurred bands hanging off the cranium's horizontal extremities.

    Returns the shadowed image and a dict with anchors, footprint and the
    occlusion field, or ``(image, None)`` when the mask has no cranium.
    """
    ends = cranium_extremities(mask)
    if ends is None:
        return image.copy(), None
    footprint = np.zeros(image.shape, dtype=bool)
    for anchor, width, angle, side in zip(ends, widths, angles_deg, (-1, 1)):
        footprint |= shadow_footprint(image.shape, anchor, width, angle, side)
    occlusion = _radial_blur(footprint.astype(np.float64), SHADOW_BLUR_SIGMA, SHADOW_BLUR_TRUNCATE)
    out = (image * (1.0 - SHADOW_STRENGTH * occlusion)).astype(np.float32)
    info = {"anchors": ends, "footprint": footprint, "occlusion": occlusion}
    return out, info


# -- geometric

def affine_matrix(zoom: float, rotate_deg: float, shear: float) -> np.ndarray:
    """2x2 linear part acting on (row, col) offsets from the image center."""
    a = math.radians(rotate_deg)
    # (x=col, y=row) convention, converted at the end
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    m_xy = rot @ sh * zoom
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    return swap @ m_xy @ swap


def affine_coords(shape, zoom: float, rotate_deg: float, translate: tuple[float, float], shear: float):
    """Source (row, col) coordinates for every output pixel."""
    h, w = shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    inv = np.linalg.inv(affine_matrix(zoom, rotate_deg, shear))
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    off = np.stack([rr - center[0] - translate[0], cc - center[1] - translate[1]])
    src = np.einsum("ij,jhw->ihw", inv, off)
    return src[0] + center[0], src[1] + center[1]


def warp(image: np.ndarray, mask: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Resample image (bilinear, 0 outside) and mask (nearest, 0 outside)."""
    img = ndimage.map_coordinates(image.astype(np.float64), [rows, cols], order=1, mode="constant", cval=0.0)
    ri, ci = nearest_index(rows, cols)
    h, w = mask.shape
    valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    msk = np.where(valid, mask[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)], 0).astype(mask.dtype)
    return np.clip(img, 0.0, 1.0).astype(np.float32), msk


def nearest_index(rows: np.ndarray, cols: np.ndarray):
    return np.floor(rows + 0.5).astype(np.int64), np.floor(cols + 0.5).astype(np.int64)


def _check_affine(zoom, rotate_deg, translate, shear, config: AugmentationConfig):
    lo, hi = config.affine_zoom
    if not (lo <= zoom <= hi or zoom == 1.0):
        raise ValueError(f"zoom {zoom} outside {config.affine_zoom}")
    if abs(rotate_deg) > max(abs(v) for v in config.affine_rotate_deg):
        raise ValueError(f"rotation {rotate_deg} outside {config.affine_rotate_deg}")
    if max(abs(t) for t in translate) > config.affine_translate_px[1]:
        raise ValueError(f"translation {translate} exceeds {config.affine_translate_px[1]} px")
    if abs(shear) > config.affine_shear[1]:
        raise ValueError(f"shear {shear} outside +/-{config.affine_shear[1]}")


def affine_transform(
    image: np.ndarray,
    mask: np.ndarray,
    zoom: float = 1.0,
    rotate_deg: float = 0.0,
    translate: tuple[float, float] = (0.0, 0.0),
    shear: float = 0.0,
    config: AugmentationConfig | None = None,
):
    """Apply one center-anchored affine map to image and mask.

    ``translate`` is (rows, cols) in pixels; magnitudes are checked against
    ``config`` (default ranges) with zero translation always allowed.
    """
    _check_affine(zoom, rotate_deg, translate, shear, config or AugmentationConfig())
    rows, cols = affine_coords(image.shape, zoom, rotate_deg, translate, shear)
    return warp(image, mask, rows, cols)


def elastic_field(shape, rng: np.random.Generator, sigma: float, max_displacement: float):
    """Smooth random displacement (drow, dcol) with peak magnitude ``max_displacement``."""
    noise = rng.uniform(-1.0, 1.0, size=(2, *shape))
    field = np.stack([ndimage.gaussian_filter(n, sigma, mode="reflect") for n in noise])
    peak = np.sqrt((field**2).sum(axis=0)).max()
    if peak == 0 or max_displacement == 0:
        return np.zeros_like(field)
    return field * (max_displacement / peak)


def elastic_deform(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    sigma: float = 50.0,
    alpha_affine: float = 50.0,
    max_displacement: float | None = None,
):
    """Warp by a Gaussian-smoothed noise field. The field's peak magnitude is
    ``max_displacement`` if given, else drawn uniformly from [0, alpha_affine]."""
    if max_displacement is None:
        max_displacement = rng.uniform(0.0, alpha_affine)
    if max_displacement > alpha_affine:
        raise ValueError(f"max_displacement {max_displacement} exceeds {alpha_affine}")
    field = elastic_field(image.shape, rng, sigma, max_displacement)
    rr, cc = np.mgrid[0:image.shape[0], 0:image.shape[1]].astype(np.float64)
    return warp(image, mask, rr + field[0], cc + field[1])


# -- pipeline

def pipeline_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(sample_id.encode()), epoch]))


def draw_parameters(config: AugmentationConfig, rng: np.random.Generator) -> dict:
    """Decide which ops fire and draw their parameters, in pipeline order."""
    p = config.per_op_probability
    u = rng.uniform
    params: dict = {}
    if rng.random() < p["affine"]:
        axis = int(rng.integers(2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        params["affine"] = {
            "zoom": u(*config.affine_zoom),
            "rotate_deg": u(*config.affine_rotate_deg),
            "translate_px": u(*config.affine_translate_px),
            "translate_axis": "row" if axis == 0 else "col",
            "translate_sign": sign,
            "shear": u(*config.affine_shear),
            "shear_sign": 1.0 if rng.random() < 0.5 else -1.0,
        }
    if rng.random() < p["elastic"]:
        params["elastic"] = {
            "sigma": config.elastic_sigma,
            "max_displacement": u(0.0, config.elastic_alpha_affine),
            "field_seed": int(rng.integers(2**32)),
        }
    if rng.random() < p["shadow"]:
        params["shadow"] = {
            "width_px": [u(*config.shadow_width_px), u(*config.shadow_width_px)],
            "angle_deg": [u(*config.shadow_angle_deg), u(*config.shadow_angle_deg)],
        }
    if rng.random() < p["motion_blur"]:
        params["motion_blur"] = {"kernel": config.motion_blur_kernel, "angle_deg": u(0.0, 180.0)}
    if rng.random() < p["quality"]:
        params["quality"] = {"severity": u(*config.quality_reduction_range)}
    if rng.random() < p["color_jitter"]:
        params["color_jitter"] = {"brightness": u(*config.brightness_range), "contrast": u(*config.contrast_range)}
    if rng.random() < p["speckle"]:
        params["speckle"] = {"std": config.speckle_std, "noise_seed": int(rng.integers(2**32))}
    return params


def apply_params(image: np.ndarray, mask: np.ndarray, params: dict, config: AugmentationConfig):
    if "affine" in params:
        a = params["affine"]
        t = a["translate_sign"] * a["translate_px"]
        translate = (t, 0.0) if a["translate_axis"] == "row" else (0.0, t)
        image, mask = affine_transform(
            image, mask, a["zoom"], a["rotate_deg"], translate, a["shear_sign"] * a["shear"], config
        )
    if "elastic" in params:
        e = params["elastic"]
        image, mask = elastic_deform(
            image, mask, np.random.default_rng(e["field_seed"]), e["sigma"],
            config.elastic_alpha_affine, e["max_displacement"]
        )
    if "shadow" in params:
        s = params["shadow"]
        image, info = acoustic_shadow(image, mask, tuple(s["width_px"]), tuple(s["angle_deg"]))
        s["anchors"] = None if info is None else [list(a) for a in info["anchors"]]
    if "motion_blur" in params:
        m = params["motion_blur"]
        image = motion_blur(image, m["angle_deg"], m["kernel"])
    if "quality" in params:
        image = quality_reduction(image, params["quality"]["severity"])
    if "color_jitter" in params:
        c = params["color_jitter"]
        image = color_jitter(image, c["brightness"], c["contrast"])
    if "speckle" in params:
        s = params["speckle"]
        image = speckle_noise(image, np.random.default_rng(s["noise_seed"]), s["std"])
    return image, mask


def apply_pipeline(
    sample: Sample, config: AugmentationConfig, seed: int, epoch: int = 0
) -> tuple[Sample, dict]:
    """Augment one sample; returns the new sample and its audit record."""
    rng = pipeline_rng(seed, sample.sample_id, epoch)
    params = draw_parameters(config, rng)
    image, mask = apply_params(sample.image, sample.mask, params, config)
    audit = {"sample_id": sample.sample_id, "seed": seed, "epoch": epoch, "ops": params}
    return replace(sample, image=image, mask=mask), audit
