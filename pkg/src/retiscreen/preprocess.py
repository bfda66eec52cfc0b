"""Deterministic fundus preprocessing: ROI crop, luminosity normalization,
resolution standardization, and training-time augmentation.

Images are float64 HWC arrays in [0, 1]. The luminosity step follows
Graham's enhancement: subtract a heavily Gaussian-blurred copy of the
image, rescale, and re-center on mid-gray, which flattens illumination
and boosts vessel/lesion contrast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAY_BIAS = 128.0 / 255.0


class AllBackgroundError(ValueError):
    """No pixel exceeded the ROI luminance threshold; refuse to crop."""


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: x0/y0 inclusive, x1/y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate bbox {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass(frozen=True)
class PreprocessConfig:
    roi_threshold: float = 7.0 / 255.0
    graham_alpha: float = 4.0
    graham_beta: float = -4.0
    graham_bias: float = GRAY_BIAS
    sigma_ratio: float = 1.0 / 30.0  # blur sigma = roi_radius * sigma_ratio
    target_size: int = 64
    clamp_output: bool = True

    def __post_init__(self):
        if self.sigma_ratio <= 0:
            raise ValueError("sigma_ratio must be positive")
        if self.target_size < 16:
            raise ValueError("target_size must be >= 16")


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_shift_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0.0 <= self.max_shift_frac <= 0.25:
            raise ValueError("max_shift_frac must lie in [0, 0.25]")


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected HWC image with 1 or 3 channels, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
    return img


def luminance(img: np.ndarray) -> np.ndarray:
    """Channel-mean luminance, HxW."""
    return img.mean(axis=2)


def crop_roi(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[np.ndarray, BBox]:
    """Crop to the tight bounding box of pixels brighter than the threshold."""
    img = validate_image(img)
    mask = luminance(img) > cfg.roi_threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise AllBackgroundError(
            f"no pixel above luminance threshold {cfg.roi_threshold:.4f}; "
            "refusing to crop an all-background image"
        )
    box = BBox(x0=int(cols[0]), y0=int(rows[0]), x1=int(cols[-1]) + 1, y1=int(rows[-1]) + 1)
    return img[box.y0:box.y1, box.x0:box.x1], box


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Truncated normalized Gaussian taps, radius = ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge padding."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    h, w = img.shape[:2]

    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, tap in enumerate(k):
        out += tap * padded[i:i + h]
    padded = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, tap in enumerate(k):
        out += tap * padded[:, i:i + w]
    return out[:, :, 0] if squeeze else out


def graham_normalize(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Subtract the Gaussian-blurred image, rescale, re-center on mid-gray.

    out = clamp(alpha*img + beta*blur(img, sigma) + bias, 0, 1) with
    sigma = roi_radius * sigma_ratio and roi_radius = max(H, W) / 2.
    The input is expected to be ROI-cropped so the radius is meaningful.
    """
    img = validate_image(img)
    h, w = img.shape[:2]
    roi_radius = max(h, w) / 2.0
    sigma = roi_radius * cfg.sigma_ratio
    if sigma <= 0 or (h == 1 and w == 1):
        blurred = img
    else:
        blurred = gaussian_blur(img, sigma)
    out = cfg.graham_alpha * img + cfg.graham_beta * blurred + cfg.graham_bias
    if cfg.clamp_output:
        out = np.clip(out, 0.0, 1.0)
    return out


def resize(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to target x target using half-pixel sample centers."""
    if target < 1:
        raise ValueError("target must be >= 1")
    img = validate_image(img)
    h, w = img.shape[:2]
    if h == target and w == target:
        return img.copy()

    def axis_coords(src: int, dst: int):
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, target)
    x0, x1, fx = axis_coords(w, target)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip plus integer shift with edge replication.

    Consumes exactly three draws from ``rng`` (flip, dy, dx) regardless
    of configuration, so sequences stay aligned across ablations.
    """
    img = validate_image(img)
    h, w = img.shape[:2]
    flip = rng.random() < cfg.flip_prob
    max_dy = int(round(cfg.max_shift_frac * h))
    max_dx = int(round(cfg.max_shift_frac * w))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    out = img[:, ::-1, :] if flip else img
    if dy or dx:
        padded = np.pad(out, ((abs(dy), abs(dy)), (abs(dx), abs(dx)), (0, 0)), mode="edge")
        out = padded[abs(dy) - dy:abs(dy) - dy + h, abs(dx) - dx:abs(dx) - dx + w]
    return np.ascontiguousarray(out)


def preprocess_image(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig(),
                     use_graham: bool = True) -> np.ndarray:
    """Canonical pipeline: crop -> graham -> resize to target_size."""
    cropped, _ = crop_roi(img, cfg)
    if use_graham:
        cropped = graham_normalize(cropped, cfg)
    return resize(cropped, cfg.target_size)
