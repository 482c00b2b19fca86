"""Synthetic multi-modality brain-like phantoms with noise and INU corruption.

All randomness comes from :class:`SplitMix64`, a counter-based 64-bit
shift/multiply generator, so every sample is a pure function of its seed and
can be regenerated bit-for-bit by any implementation of the same recipe::

    z = state + k * 0x9E3779B97F4A7C15                 (k = 1, 2, ...)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)                                 (all mod 2**64)

Uniforms take the top 53 bits; normals use Box-Muller on pairs of uniforms.
Per-sample seeds are ``mix(mix(global_seed, split_salt), sample_index)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatError
from .formats import read_pgm, read_tensor, write_pgm, write_tensor

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

CLASSES = 4
MODALITIES = 3
CLASS_NAMES = ("background", "csf", "gm", "wm")
WM = 3
NOISE_LEVELS = (0, 1, 3, 5, 7, 9)
INU_LEVELS = (0, 20, 40)
SPLIT_SALT = {"train": 0, "test": 1}

# intensity per class (background, CSF, GM, WM) for T1-, T2- and PD-like channels
MODALITY_LUT = np.array(
    [
        [0.00, 0.22, 0.52, 0.80],
        [0.00, 0.88, 0.58, 0.36],
        [0.00, 0.70, 0.82, 0.60],
    ],
    dtype=np.float64,
)


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix(seed: int, index: int) -> int:
    """Derive an independent 64-bit seed from ``(seed, index)``."""
    return _finalize((_finalize((seed + GOLDEN) & MASK64) + (index + 1) * GOLDEN) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return z

    def random(self, n: int) -> np.ndarray:
        """Uniforms in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float, n: Optional[int] = None):
        u = self.random(1 if n is None else n)
        out = lo + (hi - lo) * u
        return float(out[0]) if n is None else out

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def choice(self, options: Sequence):
        idx = int(self.next_u64(1)[0] % np.uint64(len(options)))
        return options[idx]


# ---------------------------------------------------------------- phantoms

@dataclass
class GeometryConfig:
    """Ranges for the randomized nested-ellipse anatomy (normalized coordinates)."""

    head_a: tuple = (0.74, 0.90)
    head_b: tuple = (0.64, 0.82)
    center_jitter: float = 0.05
    rotation: float = 0.35
    csf_gm_boundary: tuple = (0.80, 0.86)
    gm_wm_boundary: tuple = (0.55, 0.66)
    fold_amplitude: tuple = (0.03, 0.07)
    ventricle_size: tuple = (0.10, 0.16)
    texture_amplitude: float = 0.03
    max_retries: int = 8


@dataclass
class Phantom:
    image: np.ndarray  # (1, M, h, w) float32 in [0, 1]
    labels: np.ndarray  # (1, h, w) uint8
    meta: dict = field(default_factory=dict)


def class_shares(labels: np.ndarray, classes: int = CLASSES) -> list[float]:
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=classes)
    return (counts / counts.sum()).tolist()


def _boundary_wobble(rng: SplitMix64, phi: np.ndarray, amplitude: float, freqs: tuple) -> np.ndarray:
    out = np.ones_like(phi)
    for f in freqs:
        out += amplitude * rng.uniform(0.3, 1.0) * np.sin(f * phi + rng.uniform(0, 2 * np.pi))
    return out


def _smooth_field(rng: SplitMix64, yy: np.ndarray, xx: np.ndarray, terms: int = 3, max_freq: float = 1.5) -> np.ndarray:
    field_ = np.zeros_like(xx)
    for _ in range(terms):
        fx, fy = rng.uniform(-max_freq, max_freq), rng.uniform(-max_freq, max_freq)
        field_ += rng.uniform(0.5, 1.0) * np.cos(np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return field_


def _draw_labels(rng: SplitMix64, size: int, geo: GeometryConfig) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx = rng.uniform(-geo.center_jitter, geo.center_jitter)
    cy = rng.uniform(-geo.center_jitter, geo.center_jitter)
    theta = rng.uniform(-geo.rotation, geo.rotation)
    a, b = rng.uniform(*geo.head_a), rng.uniform(*geo.head_b)
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    phi = np.arctan2(v / b, u / a)

    outer = _boundary_wobble(rng, phi, 0.03, (2, 3))
    t1 = rng.uniform(*geo.csf_gm_boundary) * _boundary_wobble(rng, phi, rng.uniform(*geo.fold_amplitude), (5, 7))
    t2 = rng.uniform(*geo.gm_wm_boundary) * _boundary_wobble(rng, phi, rng.uniform(*geo.fold_amplitude), (4, 6, 9))

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[rho <= outer] = 1
    labels[rho <= t1] = 2
    labels[rho <= t2] = 3

    # a pair of CSF-filled ventricles inside the white matter
    vs = rng.uniform(*geo.ventricle_size)
    offset = rng.uniform(0.08, 0.16)
    tilt = rng.uniform(-0.3, 0.3)
    for side in (-1.0, 1.0):
        vu = (u / a - side * offset) / (0.55 * vs)
        vv = (v / b - side * tilt * offset) / vs
        labels[(vu ** 2 + vv ** 2 <= 1.0) & (labels == 3)] = 1
    return labels


def render_modalities(labels: np.ndarray, rng: SplitMix64, texture_amplitude: float = 0.03) -> np.ndarray:
    """Map labels through the per-modality lookup tables plus a mild smooth texture."""
    size_h, size_w = labels.shape
    ys = (np.arange(size_h) + 0.5) / size_h * 2.0 - 1.0
    xs = (np.arange(size_w) + 0.5) / size_w * 2.0 - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    fg = labels > 0
    channels = []
    for lut in MODALITY_LUT:
        base = lut[labels]
        texture = _smooth_field(rng, yy, xx, terms=3, max_freq=3.0)
        texture *= texture_amplitude / max(np.abs(texture).max(), 1e-12)
        channels.append(np.clip(base + texture * fg, 0.0, 1.0))
    return np.stack(channels)[None].astype(np.float32)


def generate_sample(seed: int, size: int = 64, geometry: Optional[GeometryConfig] = None) -> Phantom:
    """Clean phantom with every class covering at least 1% of the pixels."""
    if size % 16:
        raise ValueError(f"phantom size must be divisible by 16, got {size}")
    geo = geometry or GeometryConfig()
    for attempt in range(geo.max_retries):
        draw_seed = seed if attempt == 0 else mix(seed, 1000 + attempt)
        rng = SplitMix64(draw_seed)
        labels = _draw_labels(rng, size, geo)
        if min(class_shares(labels)) >= 0.01:
            image = render_modalities(labels, rng, geo.texture_amplitude)
            meta = {"seed": seed, "draw_seed": draw_seed, "noise": 0, "inu": 0}
            return Phantom(image, labels[None], meta)
    raise ValueError(f"seed {seed}: no phantom with all classes present after {geo.max_retries} attempts")


# ---------------------------------------------------------------- corruption

def reference_signal(image: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-modality mean intensity of the WM-like class (whole image if no labels)."""
    image = np.asarray(image)
    m = image.shape[-3]
    flat = image.reshape(-1, m, image.shape[-2] * image.shape[-1])
    if labels is None:
        return flat.mean(axis=(0, 2))
    mask = np.broadcast_to(np.asarray(labels).reshape(-1, 1, flat.shape[-1]) == WM, flat.shape)
    ref = np.array([flat[:, k][mask[:, k]].mean() for k in range(m)])
    return ref


def apply_noise(image: np.ndarray, level: float, seed: int, labels: Optional[np.ndarray] = None,
                reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Add white Gaussian noise with std ``level% x reference`` per modality, clamped to [0, 1]."""
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    image = np.asarray(image)
    if level == 0:
        return image.copy()
    ref = reference_signal(image, labels) if reference is None else np.broadcast_to(reference, (image.shape[-3],))
    sigma = (level / 100.0) * np.asarray(ref, dtype=np.float64)
    rng = SplitMix64(mix(seed, 0x4E0153))
    noise = rng.normal(image.size).reshape(image.shape)
    shape = [1] * image.ndim
    shape[-3] = image.shape[-3]
    noisy = image + noise * sigma.reshape(shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)


def inu_field(shape: tuple, level: float, seed: int, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Smooth multiplicative field whose range over ``mask`` is ``[1 - level/200, 1 + level/200]``."""
    if not 0 <= level < 200:
        raise ValueError(f"INU level must be in [0, 200), got {level}")
    h, w = shape
    if level == 0:
        return np.ones((h, w))
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    rng = SplitMix64(seed)
    raw = _smooth_field(rng, yy, xx, terms=3, max_freq=0.75)
    raw += rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy + rng.uniform(-0.5, 0.5) * xx * yy
    region = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lo, hi = raw[region].min(), raw[region].max()
    unit = (raw - lo) / max(hi - lo, 1e-12)
    half = level / 200.0
    return 1.0 - half + 2.0 * half * unit


def apply_inu(image: np.ndarray, level: float, seed: int, labels: Optional[np.ndarray] = None,
              return_fields: bool = False):
    """Multiply each modality by its own INU field, normalized over the foreground."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    mask = None if labels is None else (np.asarray(labels).reshape(h, w) > 0)
    if mask is not None and not mask.any():
        mask = None
    fields = np.stack([inu_field((h, w), level, mix(seed, 0x1A0 + k), mask) for k in range(image.shape[-3])])
    shape = (1,) * (image.ndim - 3) + fields.shape
    out = np.clip(image * fields.reshape(shape), 0.0, 1.0).astype(image.dtype)
    return (out, fields) if return_fields else out


def corrupt(phantom: Phantom, noise: float = 0, inu: float = 0) -> Phantom:
    """INU then noise, both seeded from the phantom's own seed."""
    seed = phantom.meta["seed"]
    image = phantom.image
    if inu:
        image = apply_inu(image, inu, mix(seed, 0x1AB), phantom.labels)
    if noise:
        # reference tissue intensity measured on the clean image
        image = apply_noise(image, noise, mix(seed, 0xA015E), reference=reference_signal(phantom.image, phantom.labels))
    meta = dict(phantom.meta, noise=noise, inu=inu)
    return Phantom(image, phantom.labels, meta)


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray  # (N, M, h, w) float32
    labels: np.ndarray  # (N, h, w) uint8
    meta: list = field(default_factory=list)
    split: str = "train"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.meta) != len(self.images):
            raise ValueError("images, labels and meta must have the same length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.images[indices], self.labels[indices], [self.meta[i] for i in indices], self.split, self.config)

    def phantoms(self) -> Iterator[Phantom]:
        for i in range(len(self)):
            yield Phantom(self.images[i : i + 1], self.labels[i : i + 1], self.meta[i])

    def corrupted(self, noise: float = 0, inu: float = 0) -> "Dataset":
        return from_phantoms([corrupt(p, noise, inu) for p in self.phantoms()], self.split, self.config)


def from_phantoms(phantoms: Sequence[Phantom], split: str = "train", config: Optional[dict] = None) -> Dataset:
    if not phantoms:
        raise ValueError("cannot build an empty dataset")
    images = np.concatenate([p.image for p in phantoms]).astype(np.float32)
    labels = np.concatenate([p.labels for p in phantoms]).astype(np.uint8)
    return Dataset(images, labels, [dict(p.meta) for p in phantoms], split, dict(config or {}))


def sample_seed(seed: int, split: str, index: int) -> int:
    return mix(mix(seed, SPLIT_SALT[split]), index)


def generate_dataset(count: int, size: int = 64, seed: int = 0, split: str = "train",
                     noise: Sequence[float] = (0,), inu: Sequence[float] = (0,),
                     geometry: Optional[GeometryConfig] = None) -> Dataset:
    """``count`` phantoms; each draws its noise and INU level from the given lists."""
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    noise, inu = tuple(noise), tuple(inu)
    phantoms = []
    for i in range(count):
        s = sample_seed(seed, split, i)
        picker = SplitMix64(mix(s, 0xC401CE))
        p = generate_sample(s, size, geometry)
        p.meta["index"] = i
        phantoms.append(corrupt(p, picker.choice(noise), picker.choice(inu)))
    config = {"count": count, "size": size, "seed": seed, "split": split, "noise": list(noise), "inu": list(inu)}
    return from_phantoms(phantoms, split, config)


MANIFEST = "manifest.json"
DATASET_FORMAT = "crdn-dataset"


def write_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(dataset) - 1)))
    samples = []
    for i in range(len(dataset)):
        img_name = f"img_{i:0{width}d}.crdt"
        lbl_name = f"lbl_{i:0{width}d}.pgm"
        write_tensor(directory / img_name, dataset.images[i : i + 1])
        write_pgm(directory / lbl_name, dataset.labels[i])
        samples.append(dict(dataset.meta[i], image=img_name, labels=lbl_name))
    n, m, h, w = dataset.images.shape
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "split": dataset.split,
        "count": n,
        "modalities": m,
        "height": h,
        "width": w,
        "classes": CLASSES,
        "config": dataset.config,
        "samples": samples,
    }
    with open(directory / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def read_dataset(directory, split: Optional[str] = None) -> Dataset:
    """Read a dataset directory, or ``directory/split`` when ``split`` is given."""
    directory = Path(directory)
    if split is not None and not (directory / MANIFEST).exists() and (directory / split / MANIFEST).exists():
        directory = directory / split
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset manifest not found")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset manifest")
    samples = manifest.get("samples", [])
    if manifest.get("count") != len(samples):
        raise FormatError(f"{path}: count {manifest.get('count')} but {len(samples)} samples listed")
    if not samples:
        raise FormatError(f"{path}: dataset is empty")
    images, labels, meta = [], [], []
    shape = (1, manifest["modalities"], manifest["height"], manifest["width"])
    for entry in samples:
        img_path, lbl_path = directory / entry["image"], directory / entry["labels"]
        for p in (img_path, lbl_path):
            if not p.exists():
                raise FileNotFoundError(f"{p}: listed in manifest but missing")
        img = read_tensor(img_path)
        if img.shape != shape:
            raise FormatError(f"{img_path}: shape {img.shape}, manifest says {shape}")
        lbl = read_pgm(lbl_path)
        if lbl.shape != shape[2:]:
            raise FormatError(f"{lbl_path}: shape {lbl.shape}, manifest says {shape[2:]}")
        if lbl.max() >= manifest["classes"]:
            raise FormatError(f"{lbl_path}: label {lbl.max()} out of range")
        images.append(img)
        labels.append(lbl)
        meta.append({k: v for k, v in entry.items() if k not in ("image", "labels")})
    return Dataset(
        np.concatenate(images).astype(np.float32),
        np.stack(labels).astype(np.uint8),
        meta,
        manifest.get("split", "train"),
        manifest.get("config", {}),
    )
