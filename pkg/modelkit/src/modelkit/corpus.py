"""Deterministic digit corpus.

The default corpus is synthesized from 7x5 dot-matrix glyphs: each sample is a
bilinearly upsampled glyph pushed through a random affine warp (rotation,
scale, shear, subpixel translation), a Gaussian blur, an intensity roll-off,
and additive noise. Sample ``i`` is a pure function of ``(seed, i)`` — any
index can be produced without generating its predecessors — and class labels
cycle ``i % 10`` so every slice of the index space is balanced.

A loader for the classic idx image/label file pair is provided for callers
who have real handwritten-digit data on disk; the synthetic corpus keeps the
harness self-contained and reproducible without downloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError

IMAGE_SIDE = 28
CORPUS_SIZE = 10_000

# index-space partition; slices are disjoint by construction
POOLS = {
    "train": range(0, 6000),
    "calibration": range(6000, 8000),
    "holdout": range(8000, 10_000),
}

# 7 rows x 5 columns, classic dot-matrix digits
_GLYPH_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph(digit: int) -> np.ndarray:
    rows = _GLYPH_ROWS[digit]
    return np.array([[float(ch) for ch in row] for row in rows])


def _template(digit: int) -> np.ndarray:
    """28x28 float template: glyph upsampled 4x and centered."""
    up = ndimage.zoom(_glyph(digit), 4.0, order=1)  # (28, 20)
    out = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
    left = (IMAGE_SIDE - up.shape[1]) // 2
    out[:, left : left + up.shape[1]] = up
    return np.clip(out, 0.0, 1.0)


_TEMPLATES = [_template(d) for d in range(10)]


# jitter envelope; tuned so float training stays comfortably above the export
# floor while class margins remain small enough for fault studies to resolve
JITTER = {
    "rotate_deg": 12.0,
    "scale": (0.85, 1.15),
    "shear": 0.1,
    "shift_px": 2.5,
    "blur_sigma": (0.4, 0.8),
    "intensity": (0.6, 1.0),
    "noise_sigma": 0.03,
}


def _warp(template: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    j = JITTER
    angle = np.deg2rad(rng.uniform(-j["rotate_deg"], j["rotate_deg"]))
    scale = rng.uniform(*j["scale"])
    shear = rng.uniform(-j["shear"], j["shear"])
    shift = rng.uniform(-j["shift_px"], j["shift_px"], size=2)  # (rows, cols)

    c, s = np.cos(angle), np.sin(angle)
    lin = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    center = np.array([(IMAGE_SIDE - 1) / 2.0] * 2)
    fwd = np.eye(3)
    fwd[:2, :2] = lin
    fwd[:2, 2] = center + shift - lin @ center
    inv = np.linalg.inv(fwd)
    warped = ndimage.affine_transform(
        template, inv[:2, :2], offset=inv[:2, 2], order=1, mode="constant", cval=0.0
    )

    warped = ndimage.gaussian_filter(warped, sigma=rng.uniform(*j["blur_sigma"]))
    warped = warped * rng.uniform(*j["intensity"])
    warped = warped + rng.normal(0.0, j["noise_sigma"], size=warped.shape)
    return np.clip(warped, 0.0, 1.0)


@dataclass(frozen=True)
class SyntheticCorpus:
    seed: int
    size: int = CORPUS_SIZE

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ConfigError("corpus size must be >= 1")

    def label(self, index: int) -> int:
        self._check(index)
        return index % 10

    def sample(self, index: int) -> np.ndarray:
        """Pixels for one sample, (28, 28) float64 in [0, 1]."""
        self._check(index)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        return _warp(_TEMPLATES[index % 10], rng)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """(pixels (n, 28, 28, 1) float64, labels (n,) int64) for an index list."""
        idx = list(indices)
        pixels = np.stack([self.sample(i) for i in idx])[..., np.newaxis]
        labels = np.array([self.label(i) for i in idx], dtype=np.int64)
        return pixels, labels

    def _check(self, index: int) -> None:
        if not 0 <= index < self.size:
            raise ConfigError(f"corpus index {index} outside [0, {self.size})")


# ---------------------------------------------------------------------------
# optional idx-format loader for locally available real data


def load_idx_images(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x0803:
        raise ConfigError(f"{path}: not an idx3 image file (magic {magic:#x})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if data.size != count * rows * cols:
        raise ConfigError(f"{path}: truncated image payload")
    return data.reshape(count, rows, cols).astype(np.float64) / 255.0


def load_idx_labels(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, count = struct.unpack(">II", raw[:8])
    if magic != 0x0801:
        raise ConfigError(f"{path}: not an idx1 label file (magic {magic:#x})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if data.size != count:
        raise ConfigError(f"{path}: truncated label payload")
    return data.astype(np.int64)
