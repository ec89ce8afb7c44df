"""Class map, samples, manifests, PNG I/O, balancing/splitting and the synthetic
phantom generator used in place of clinical scans."""
from __future__ import annotations

import csv
import json
import math
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

HEIGHT, WIDTH = 160, 288

CLASS_NAMES = (
    "background",
    "cranium",
    "brain_parenchyma",
    "csp",
    "midline_falx",
    "choroid_plexus",
    "lateral_ventricles",
    "cerebellum",
    "cisterna_magna",
    "nuchal_fold",
    "skin",
)
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
FOREGROUND = tuple(range(1, len(CLASS_NAMES)))
CRANIUM = CLASS_INDEX["cranium"]

PLANE_CLASSES = {
    "TV": frozenset({1, 2, 3, 4, 5, 6}),
    "TC": frozenset({1, 2, 3, 4, 7, 8, 9, 10}),
}
SPLITS = ("train", "val", "test1", "test2", "test3", "test4")

MANIFEST_FIELDS = ("image_path", "mask_path", "plane", "device", "center", "subject_id", "split")


class DataError(ValueError):
    """A sample or manifest failed validation."""


def allowed_classes(plane: str) -> frozenset[int]:
    try:
        return PLANE_CLASSES[plane] | {0}
    except KeyError:
        raise DataError(f"unknown plane {plane!r}") from None


@dataclass
class Sample:
    image: np.ndarray  # float32 (H, W) in [0, 1]
    mask: np.ndarray  # uint8 (H, W) class indices
    plane: str
    device: str = ""
    center: str = ""
    subject_id: str = ""
    split: str = "train"
    sample_id: str = ""

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise DataError(f"{self.sample_id}: image {self.image.shape} vs mask {self.mask.shape}")
        bad = set(np.unique(self.mask).tolist()) - allowed_classes(self.plane)
        if bad:
            raise DataError(f"{self.sample_id}: classes {sorted(bad)} not allowed in plane {self.plane}")

    def meta(self) -> dict:
        return {k: getattr(self, k) for k in ("plane", "device", "center", "subject_id", "split", "sample_id")}


@dataclass
class ManifestRecord:
    image_path: str
    mask_path: str
    plane: str
    device: str
    center: str
    subject_id: str
    split: str

    @property
    def sample_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path | None = None  # relative paths resolve against this

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, *splits: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split in splits], self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise DataError(f"duplicate image path {r.image_path}")
            seen.add(r.image_path)
        train = {r.subject_id for r in self.records if r.split == "train"}
        val = {r.subject_id for r in self.records if r.split == "val"}
        leaked = train & val
        if leaked:
            raise DataError(f"subjects in both train and val: {sorted(leaked)[:5]}")

    def stats(self) -> dict:
        counts: dict = defaultdict(int)
        for r in self.records:
            counts[(r.split, r.device, r.plane)] += 1
        return {"/".join(k): v for k, v in sorted(counts.items())}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
            writer.writeheader()
            for r in self.records:
                writer.writerow(asdict(r))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise DataError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
            records = [ManifestRecord(**row) for row in reader]
        manifest = cls(records, path.parent)
        manifest.validate()
        return manifest


# -- image / mask I/O

def save_sample(sample: Sample, image_path, mask_path) -> None:
    Image.fromarray(np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8), mode="L").save(image_path)
    mask = Image.fromarray(sample.mask.astype(np.uint8), mode="P")
    mask.putpalette(PALETTE)
    mask.save(mask_path)


def load_sample(record: ManifestRecord, root: Path | None = None) -> Sample:
    """Read an image/mask pair and resize to 160x288 (bilinear / nearest)."""
    img_path = Path(record.image_path)
    mask_path = Path(record.mask_path)
    if root is not None:
        img_path = img_path if img_path.is_absolute() else root / img_path
        mask_path = mask_path if mask_path.is_absolute() else root / mask_path
    try:
        img = Image.open(img_path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"{img_path}: cannot read image ({exc})") from exc
    try:
        msk = Image.open(mask_path)
        msk.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"{mask_path}: cannot read mask ({exc})") from exc
    if img.size != msk.size:
        raise DataError(f"{mask_path}: mask size {msk.size} differs from image size {img.size}")
    if msk.mode not in ("P", "L"):
        raise DataError(f"{mask_path}: mask must be an 8-bit indexed PNG, got mode {msk.mode}")
    mask = np.array(msk)
    if mask.max(initial=0) > 10:
        raise DataError(f"{mask_path}: mask value {int(mask.max())} > 10")
    img = img.convert("L")
    if img.size != (WIDTH, HEIGHT):
        img = img.resize((WIDTH, HEIGHT), Image.BILINEAR)
        mask = np.array(Image.fromarray(mask).resize((WIDTH, HEIGHT), Image.NEAREST))
    sample = Sample(
        image=np.asarray(img, dtype=np.float32) / 255.0,
        mask=mask.astype(np.uint8),
        plane=record.plane,
        device=record.device,
        center=record.center,
        subject_id=record.subject_id,
        split=record.split,
        sample_id=record.sample_id,
    )
    try:
        sample.validate()
    except DataError as exc:
        raise DataError(f"{mask_path}: {exc}") from exc
    return sample


def load_manifest_samples(manifest: Manifest) -> list[Sample]:
    return [load_sample(r, manifest.root) for r in manifest.records]


def _make_palette() -> list[int]:
    colors = [
        (0, 0, 0), (255, 255, 255), (70, 130, 180), (255, 215, 0), (220, 20, 60),
        (50, 205, 50), (138, 43, 226), (255, 140, 0), (0, 206, 209), (255, 105, 180), (160, 82, 45),
    ]
    flat = [v for c in colors for v in c]
    return flat + [0] * (768 - len(flat))


PALETTE = _make_palette()


# -- balancing and splits

def balance_upsample(manifest: Manifest, group_key: str = "device") -> Manifest:
    """Repeat training records cyclically so every group matches the largest one.
    Non-training records pass through untouched."""
    groups: dict[str, list[ManifestRecord]] = defaultdict(list)
    for r in manifest.records:
        if r.split == "train":
            groups[getattr(r, group_key)].append(r)
    if not groups:
        raise DataError("balance_upsample: no training records")
    target = max(len(g) for g in groups.values())
    out = [r for r in manifest.records if r.split != "train"]
    for key in sorted(groups):
        g = groups[key]
        out.extend(g[i % len(g)] for i in range(target))
    return Manifest(out, manifest.root)


def split_train_val(manifest: Manifest, ratio: float = 0.897, seed: int = 0) -> Manifest:
    """Assign train/val by subject so that about ``ratio`` of the samples train.

    Only records currently labelled train or val (or unlabelled) are reassigned.
    """
    pool = [r for r in manifest.records if r.split in ("train", "val", "")]
    by_subject: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(pool):
        if not r.subject_id:
            raise DataError(f"{r.image_path}: missing subject_id")
        by_subject[r.subject_id].append(i)
    subjects = sorted(by_subject)
    if len(subjects) < 2:
        raise DataError("split_train_val needs at least 2 subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    target_val = (1.0 - ratio) * len(pool)
    val_subjects, n_val = set(), 0
    for k in order:
        s = subjects[k]
        size = len(by_subject[s])
        if abs(n_val + size - target_val) < abs(n_val - target_val):
            val_subjects.add(s)
            n_val += size
    if not val_subjects:
        val_subjects.add(subjects[order[-1]])
    if len(val_subjects) == len(subjects):
        val_subjects.discard(subjects[order[0]])
    reassigned = {
        id(r): replace(r, split="val" if r.subject_id in val_subjects else "train") for r in pool
    }
    return Manifest([reassigned.get(id(r), r) for r in manifest.records], manifest.root)


# -- phantoms

@dataclass(frozen=True)
class DeviceProfile:
    speckle_std: float
    contrast_gamma: float
    brightness_offset: float
    blur_sigma: float


DEFAULT_PROFILES: dict[str, DeviceProfile] = {
    "voluson_e8": DeviceProfile(0.08, 1.0, 0.00, 0.8),
    "voluson_s10": DeviceProfile(0.10, 0.85, 0.05, 1.2),
    "hera_w10": DeviceProfile(0.35, 1.3, 0.15, 0.5),
    "voluson_p6": DeviceProfile(0.08, 0.8, 0.06, 1.6),
    "voluson_e10": DeviceProfile(0.22, 1.15, 0.02, 1.0),
    "voluson_p8": DeviceProfile(0.45, 1.6, -0.08, 2.2),
}


def load_profiles(path=None) -> dict[str, DeviceProfile]:
    if path is None:
        return dict(DEFAULT_PROFILES)
    raw = json.loads(Path(path).read_text())
    return {name: DeviceProfile(**vals) for name, vals in raw.items()}


def save_profiles(profiles: dict[str, DeviceProfile], path) -> None:
    Path(path).write_text(json.dumps({k: asdict(v) for k, v in profiles.items()}, indent=2))


# base echogenicity per class
_INTENSITY = np.array([0.02, 0.95, 0.47, 0.20, 0.83, 0.56, 0.29, 0.65, 0.11, 0.38, 0.74], dtype=np.float32)


def _ellipse(rr, cc, r0, c0, a_r, a_c, theta):
    """Normalized radius of each pixel in a rotated ellipse frame."""
    dr, dc = rr - r0, cc - c0
    u = dc * math.cos(theta) + dr * math.sin(theta)  # along the major (horizontal) axis
    v = -dc * math.sin(theta) + dr * math.cos(theta)
    return np.sqrt((u / a_c) ** 2 + (v / a_r) ** 2), u, v


def render_phantom_mask(plane: str, rng: np.random.Generator) -> np.ndarray:
    """Schematic axial head section with randomized pose and size."""
    rr, cc = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float32)
    r0 = HEIGHT / 2 + rng.uniform(-8, 8)
    c0 = WIDTH / 2 + rng.uniform(-15, 15)
    a_r = rng.uniform(50, 62)
    a_c = rng.uniform(88, 110)
    theta = math.radians(rng.uniform(-10, 10))
    thick = rng.uniform(5, 8)
    rad, u, v = _ellipse(rr, cc, r0, c0, a_r, a_c, theta)
    inner = 1.0 - thick / min(a_r, a_c)
    mask = np.zeros((HEIGHT, WIDTH), dtype=np.uint8)

    if plane == "TC":
        # skin and nuchal fold sit outside the skull at the posterior (right) end
        mask[(rad < 1.0 + 12 / a_c) & (rad >= 1.0 + 4 / a_c)] = CLASS_INDEX["skin"]
        nuchal = (rad >= 1.0) & (rad < 1.0 + 18 / a_c) & (u > 0.82 * a_c) & (np.abs(v) < 0.35 * a_r)
        mask[nuchal] = CLASS_INDEX["nuchal_fold"]

    mask[(rad < 1.0) & (rad >= inner)] = CRANIUM
    brain = rad < inner
    mask[brain] = CLASS_INDEX["brain_parenchyma"]

    # CSP: box on the midline in the anterior third
    csp_c = -0.45 * a_c
    csp = brain & (np.abs(u - csp_c) < rng.uniform(10, 14)) & (np.abs(v) < rng.uniform(6, 8))
    mask[csp] = CLASS_INDEX["csp"]
    falx = brain & (np.abs(v) < 3.0) & ~csp & (u > -0.85 * a_c * inner) & (u < 0.85 * a_c * inner)

    if plane == "TV":
        for side in (-1, 1):
            lv_r, lv_c = side * 0.38 * a_r, 0.30 * a_c
            d_lv = ((u - lv_c) / rng.uniform(26, 32)) ** 2 + ((v - lv_r) / rng.uniform(10, 13)) ** 2
            mask[brain & (d_lv < 1.0)] = CLASS_INDEX["lateral_ventricles"]
            d_cp = ((u - lv_c) / 16.0) ** 2 + ((v - lv_r) / 6.5) ** 2
            mask[brain & (d_cp < 1.0)] = CLASS_INDEX["choroid_plexus"]
        mask[falx] = CLASS_INDEX["midline_falx"]
    else:
        cm_c = 0.62 * a_c * inner
        d_cm = ((u - cm_c) / 18.0) ** 2 + (v / rng.uniform(20, 26)) ** 2
        mask[brain & (d_cm < 1.0)] = CLASS_INDEX["cisterna_magna"]
        for side in (-1, 1):
            d_cb = ((u - 0.40 * a_c) / rng.uniform(14, 18)) ** 2 + ((v - side * 0.22 * a_r) / 11.0) ** 2
            mask[brain & (d_cb < 1.0)] = CLASS_INDEX["cerebellum"]
        mask[falx & (u < 0.2 * a_c)] = CLASS_INDEX["midline_falx"]
    return mask


def render_image(mask: np.ndarray, profile: DeviceProfile, rng: np.random.Generator) -> np.ndarray:
    """Map classes to echo intensities and apply the device's imaging chain."""
    base = _INTENSITY[mask]
    base = base + rng.normal(0, 0.02, size=mask.shape).astype(np.float32)
    if profile.blur_sigma > 0:
        base = ndimage.gaussian_filter(base, profile.blur_sigma)
    img = np.clip(base, 0, 1) ** profile.contrast_gamma + profile.brightness_offset
    img = img * (1.0 + rng.normal(0, profile.speckle_std, size=mask.shape))
    return np.clip(img, 0, 1).astype(np.float32)


def phantom_generate(
    count: int,
    plane: str,
    device_profile: str,
    seed: int,
    profiles: dict[str, DeviceProfile] | None = None,
    center: str = "phantom",
    split: str = "train",
) -> list[Sample]:
    if count < 0:
        raise DataError("count must be non-negative")
    if plane not in PLANE_CLASSES:
        raise DataError(f"unknown plane {plane!r}")
    profiles = DEFAULT_PROFILES if profiles is None else profiles
    if device_profile not in profiles:
        raise DataError(f"unknown device profile {device_profile!r}; known: {sorted(profiles)}")
    profile = profiles[device_profile]
    children = np.random.SeedSequence([seed, _stable_hash(plane), _stable_hash(device_profile)]).spawn(count)
    out = []
    for i, ss in enumerate(children):
        # geometry and imaging draw from separate streams so a profile change
        # leaves anatomy untouched
        geo_rng, img_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        mask = render_phantom_mask(plane, geo_rng)
        sid = f"{plane.lower()}_{device_profile}_{seed}_{i:05d}"
        out.append(
            Sample(
                image=render_image(mask, profile, img_rng),
                mask=mask,
                plane=plane,
                device=device_profile,
                center=center,
                subject_id=sid,
                split=split,
                sample_id=sid,
            )
        )
    return out


def _stable_hash(s: str) -> int:
    return zlib.crc32(s.encode())


def write_dataset(samples: Iterable[Sample], out_dir) -> Manifest:
    """Save samples as PNG pairs under ``out_dir`` and return their manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        img = f"images/{s.sample_id}.png"
        msk = f"masks/{s.sample_id}.png"
        save_sample(s, out_dir / img, out_dir / msk)
        records.append(ManifestRecord(img, msk, s.plane, s.device, s.center, s.subject_id, s.split))
    manifest = Manifest(records, out_dir)
    manifest.validate()
    return manifest
