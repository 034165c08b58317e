"""Deterministic synthetic datasets plus parametric natural/system noise.

The shapes dataset stands in for CIFAR-scale image data and the spirals
dataset covers the fast MLP path. Corruptions and resample pipelines are pure
functions of their arguments and seed, so regeneration is bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import resample
from .errors import ArgumentError, FormatError
from .tensor import save_tensor
from .util import hash_arrays, rng_from

CORRUPTION_KINDS = ("brightness", "contrast", "gaussian_blur", "motion_blur", "gaussian_noise")

# severity parameter tables (implementation constants, severity 1..5)
_BRIGHTNESS = (0.1, 0.2, 0.3, 0.4, 0.5)
_CONTRAST = (0.75, 0.6, 0.45, 0.3, 0.2)
_BLUR_SIGMA = (0.5, 0.75, 1.0, 1.5, 2.0)
_MOTION_LEN = (3, 4, 5, 7, 9)
_NOISE_SIGMA = (0.04, 0.06, 0.08, 0.12, 0.18)


@dataclass
class Dataset:
    """Inputs plus integer labels; images are [N, C, H, W] in [0, 1]."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.name, self.inputs[idx], self.labels[idx], self.n_classes, self.seed)

    def fingerprint(self):
        return hash_arrays(self.inputs, self.labels)

    def export(self, prefix):
        """Write inputs in the flat tensor format and labels as CSV."""
        save_tensor(f"{prefix}_inputs.bin", self.inputs)
        with open(f"{prefix}_labels.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "label"])
            for i, lab in enumerate(self.labels):
                writer.writerow([i, int(lab)])


@dataclass
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ArgumentError(f"unknown corruption kind: {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ArgumentError(f"severity must be 1..5, got {self.severity}")
        self.severity = int(self.severity)


@dataclass
class ResamplePipeline:
    down: str
    up: str
    intermediate_size: int

    def __post_init__(self):
        for name in (self.down, self.up):
            if name not in resample.RESAMPLERS:
                raise ArgumentError(f"unknown resampler: {name!r}")
        if self.intermediate_size < 2:
            raise ArgumentError("intermediate_size must be >= 2")


# ---------------------------------------------------------------------------
# synthetic datasets

_TEMPLATE_ORDER = (
    "horizontal_bar", "vertical_bar", "cross", "square_outline",
    "diagonal", "disk", "checker", "frame",
)


def _render_template(kind, side, rng):
    img = np.zeros((side, side))
    thick = max(1, side // 6)
    if kind == "horizontal_bar":
        r = int(rng.integers(0, side - thick + 1))
        img[r:r + thick, :] = 1.0
    elif kind == "vertical_bar":
        c = int(rng.integers(0, side - thick + 1))
        img[:, c:c + thick] = 1.0
    elif kind == "cross":
        r = int(rng.integers(thick, side - 2 * thick + 1))
        c = int(rng.integers(thick, side - 2 * thick + 1))
        img[r:r + thick, :] = 1.0
        img[:, c:c + thick] = 1.0
    elif kind == "square_outline":
        size = side // 2
        r = int(rng.integers(0, side - size + 1))
        c = int(rng.integers(0, side - size + 1))
        img[r:r + size, c:c + size] = 1.0
        inner = img[r + thick:r + size - thick, c + thick:c + size - thick]
        inner[:] = 0.0
    elif kind == "diagonal":
        d = int(rng.integers(-side // 3, side // 3 + 1))
        ii, jj = np.indices((side, side))
        img[np.abs(ii - jj - d) < thick] = 1.0
    elif kind == "disk":
        radius = side // 4
        cy = int(rng.integers(radius, side - radius))
        cx = int(rng.integers(radius, side - radius))
        ii, jj = np.indices((side, side))
        img[(ii - cy) ** 2 + (jj - cx) ** 2 <= radius ** 2] = 1.0
    elif kind == "checker":
        cell = max(2, side // 4)
        phase = int(rng.integers(0, 2))
        ii, jj = np.indices((side, side))
        img[((ii // cell + jj // cell) % 2) == phase] = 1.0
    elif kind == "frame":
        inset = int(rng.integers(0, max(1, side // 6)))
        img[inset:side - inset, inset:side - inset] = 1.0
        inner = img[inset + thick:side - inset - thick, inset + thick:side - inset - thick]
        inner[:] = 0.0
    return img


def make_shapes_dataset(n_per_class, image_side, n_classes, noise_std, seed):
    """Grayscale geometric-template classes at random offsets plus pixel noise."""
    if not 3 <= n_classes <= 8:
        raise ArgumentError(f"n_classes must be 3..8, got {n_classes}")
    if not 8 <= image_side <= 32:
        raise ArgumentError(f"image_side must be 8..32, got {image_side}")
    if not 0.0 <= noise_std <= 0.3:
        raise ArgumentError(f"noise_std must be in [0, 0.3], got {noise_std}")
    rng = rng_from(seed, "shapes")
    images = np.zeros((n_per_class * n_classes, 1, image_side, image_side))
    labels = np.zeros(n_per_class * n_classes, dtype=np.int64)
    i = 0
    for cls in range(n_classes):
        for _ in range(n_per_class):
            img = _render_template(_TEMPLATE_ORDER[cls], image_side, rng)
            if noise_std > 0:
                img = img + rng.normal(0.0, noise_std, size=img.shape)
            images[i, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = cls
            i += 1
    return Dataset("shapes", images, labels, n_classes, seed)


def make_spirals_dataset(n, turns, noise_std, seed):
    """Two interleaved spirals in [0, 1]^2; class-0 points sit at radius t
    around the center (0.5, 0.5)."""
    if n % 2 != 0:
        raise ArgumentError(f"n must be even, got {n}")
    if n < 8:
        raise ArgumentError(f"n must be >= 8, got {n}")
    rng = rng_from(seed, "spirals")
    half = n // 2
    t = np.linspace(0.05, 0.45, half)
    theta = 2.0 * np.pi * turns * (t - 0.05) / 0.4
    pts0 = np.stack([0.5 + t * np.cos(theta), 0.5 + t * np.sin(theta)], axis=1)
    pts1 = np.stack([0.5 + t * np.cos(theta + np.pi), 0.5 + t * np.sin(theta + np.pi)], axis=1)
    pts = np.concatenate([pts0, pts1], axis=0)
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    pts = np.clip(pts, 0.0, 1.0)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return Dataset("spirals", pts, labels, 2, seed)


# ---------------------------------------------------------------------------
# natural noise (parametric corruptions)


def _motion_kernel(length, angle):
    k = np.zeros((9, 9))
    c = 4
    for step in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length):
        r = int(round(c + step * np.sin(angle)))
        col = int(round(c + step * np.cos(angle)))
        k[min(max(r, 0), 8), min(max(col, 0), 8)] += 1.0
    return k / k.sum()


def corrupt(x, spec, seed=0):
    """Apply a parametric corruption to a [C, H, W] (or [H, W]) image in [0, 1]."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(**spec)
    img = np.asarray(x, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    s = spec.severity - 1
    if spec.kind == "brightness":
        out = img + _BRIGHTNESS[s]
    elif spec.kind == "contrast":
        out = 0.5 + _CONTRAST[s] * (img - 0.5)
    elif spec.kind == "gaussian_blur":
        out = np.stack([
            ndimage.gaussian_filter(ch, sigma=_BLUR_SIGMA[s], mode="reflect") for ch in img
        ])
    elif spec.kind == "motion_blur":
        angle = float(rng_from(seed, "motion").uniform(0.0, np.pi))
        kernel = _motion_kernel(_MOTION_LEN[s], angle)
        out = np.stack([
            ndimage.convolve(ch, kernel, mode="reflect") for ch in img
        ])
    else:  # gaussian_noise
        rng = rng_from(seed, "gnoise")
        out = img + rng.normal(0.0, _NOISE_SIGMA[s], size=img.shape)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


def system_noise(x, pipeline):
    """Down-then-up resampling round trip, the decode/resize mismatch stand-in."""
    if not isinstance(pipeline, ResamplePipeline):
        pipeline = ResamplePipeline(**pipeline)
    img = np.asarray(x, dtype=np.float64)
    side = img.shape[-1]
    if pipeline.intermediate_size > side:
        raise ArgumentError(
            f"intermediate_size {pipeline.intermediate_size} exceeds image side {side}"
        )
    small = resample.resize(img, pipeline.intermediate_size, pipeline.down)
    big = resample.resize(small, side, pipeline.up)
    return np.clip(big, 0.0, 1.0)


def corrupt_dataset(dataset, spec, seed=0):
    """Corrupt every image; per-image seeds derive from (seed, index)."""
    out = np.stack([
        corrupt(dataset.inputs[i], spec, seed=int(seed) * 100003 + i) for i in range(len(dataset))
    ])
    return Dataset(f"{dataset.name}+{spec.kind}{spec.severity}", out, dataset.labels,
                   dataset.n_classes, dataset.seed)


def system_noise_dataset(dataset, pipeline):
    out = np.stack([system_noise(dataset.inputs[i], pipeline) for i in range(len(dataset))])
    name = f"{dataset.name}+{pipeline.down}-{pipeline.up}{pipeline.intermediate_size}"
    return Dataset(name, out, dataset.labels, dataset.n_classes, dataset.seed)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches (optional real-data ingestion)

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 plane-major pixels


def load_cifar10_binary(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record"
        )
    n = len(raw) // _CIFAR_RECORD
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, _CIFAR_RECORD) if n else \
        np.zeros((0, _CIFAR_RECORD), dtype=np.uint8)
    labels = records[:, 0].astype(np.int64)
    if n and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    pixels = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset("cifar10", pixels, labels, 10)
