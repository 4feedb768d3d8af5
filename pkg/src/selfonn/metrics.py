"""Image fidelity metrics: PSNR and SSIM.

Both metrics default to the normalized [0, 1] convention (peak = 1); pass
peak = 255 for 8-bit data. Identical images report infinite PSNR, which is
carried as a sentinel and excluded from means so aggregates stay defined.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["psnr", "ssim", "ImageScore", "MetricReport", "SSIM_WINDOW"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable filtering, windows fully inside the image
    rows = np.matmul(sliding_window_view(img, len(g), axis=0), g)
    return np.matmul(sliding_window_view(rows, len(g), axis=1), g)


def _ssim_2d(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    g = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local structural similarity with the standard Gaussian window.

    11x11 window, sigma 1.5, biased local moments; channel-averaged when a
    leading channel axis is present. Images smaller than the window are
    rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError(f"expected (h, w) or (c, h, w) images, got shape {a.shape}")
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape[1]}x{a.shape[2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    return float(np.mean([_ssim_2d(a[c], b[c], peak) for c in range(a.shape[0])]))


@dataclass
class ImageScore:
    image_id: str
    psnr: float
    ssim: float | None = None


@dataclass
class MetricReport:
    """Per-image scores plus their means.

    Infinite PSNR entries are excluded from the PSNR mean; if every entry
    is infinite the mean is reported as infinity.
    """

    peak: float = 1.0
    scores: list[ImageScore] = field(default_factory=list)

    def add(self, image_id: str, psnr_value: float, ssim_value: float | None = None):
        self.scores.append(ImageScore(image_id, psnr_value, ssim_value))

    @property
    def mean_psnr(self) -> float:
        finite = [s.psnr for s in self.scores if math.isfinite(s.psnr)]
        if not finite:
            return math.inf if self.scores else math.nan
        return sum(finite) / len(finite)

    @property
    def mean_ssim(self) -> float:
        vals = [s.ssim for s in self.scores if s.ssim is not None]
        if not vals:
            return math.nan
        return sum(vals) / len(vals)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "psnr_db", "ssim"])
            for s in self.scores:
                writer.writerow([s.image_id, repr(s.psnr), "" if s.ssim is None else repr(s.ssim)])
            writer.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])

    def to_dict(self) -> dict:
        return {
            "peak": self.peak,
            "images": [
                {"id": s.image_id, "psnr_db": s.psnr, "ssim": s.ssim} for s in self.scores
            ],
            "mean_psnr_db": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
        }
