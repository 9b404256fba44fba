"""PSNR and SSIM between a reference (noise-free) volume and a test volume."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from uwgan.volume import Volume4D


def _pair(clean, test) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(clean.data if isinstance(clean, Volume4D) else clean, dtype=np.float64)
    b = np.asarray(test.data if isinstance(test, Volume4D) else test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    return a, b


def _frames(a: np.ndarray, b: np.ndarray):
    if a.ndim != 4:
        raise ValueError("per-frame metrics need 4D inputs")
    for k in range(a.shape[3]):
        yield a[..., k], b[..., k]


def psnr(clean, test, per_frame: bool = False) -> float:
    """10 log10(V * Max^2 / ||clean - test||^2), Max taken over both volumes.

    Identical inputs give ``math.inf``. With ``per_frame`` the value is the
    mean over frames of the 4D volumes.
    """
    a, b = _pair(clean, test)
    if per_frame:
        return float(np.mean([psnr(x, y) for x, y in _frames(a, b)]))
    sq = float(np.sum((a - b) ** 2))
    if sq == 0:
        return math.inf
    peak = max(float(a.max()), float(b.max()))
    return 10 * math.log10(a.size * peak**2 / sq)


def _ssim_constants(a, b, data_range):
    L = data_range if data_range is not None else max(float(a.max()), float(b.max()))
    return (0.01 * L) ** 2, (0.03 * L) ** 2


def _ssim_global(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> float:
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a = np.mean(da * da)
    var_b = np.mean(db * db)
    cov = np.mean(da * db)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(num / den)


def _ssim_windowed(a: np.ndarray, b: np.ndarray, c1: float, c2: float, window: int) -> float:
    size = [window] * 3 + [1] * (a.ndim - 3)
    if any(s > d for s, d in zip(size, a.shape)):
        raise ValueError(f"window {window} larger than volume {a.shape}")
    mu_a = uniform_filter(a, size)
    mu_b = uniform_filter(b, size)
    var_a = uniform_filter(a * a, size) - mu_a**2
    var_b = uniform_filter(b * b, size) - mu_b**2
    cov = uniform_filter(a * b, size) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    # keep windows fully inside the volume
    h = window // 2
    inner = tuple(slice(h, d - (window - 1 - h)) if i < 3 else slice(None) for i, d in enumerate(a.shape))
    return float(smap[inner].mean())


def ssim(clean, test, data_range: float | None = None, window: int | None = None, per_frame: bool = False) -> float:
    """Global-statistics SSIM; ``window`` switches to the mean of cubic-window SSIMs.

    c1 = (0.01 L)^2, c2 = (0.03 L)^2 with L the shared maximum intensity
    unless ``data_range`` is given.
    """
    a, b = _pair(clean, test)
    if per_frame:
        return float(np.mean([ssim(x, y, data_range, window) for x, y in _frames(a, b)]))
    c1, c2 = _ssim_constants(a, b, data_range)
    if window is None:
        return _ssim_global(a, b, c1, c2)
    return _ssim_windowed(a, b, c1, c2, window)


@dataclass(frozen=True)
class QualityRow:
    subject: str
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class QualityReport:
    rows: list[QualityRow]

    @property
    def psnr_mean_std(self) -> tuple[float, float]:
        return mean_std([r.psnr_db for r in self.rows])

    @property
    def ssim_mean_std(self) -> tuple[float, float]:
        return mean_std([r.ssim for r in self.rows])

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.subject, repr(r.psnr_db), repr(r.ssim)])


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_pairs(pairs, per_frame: bool = False, window: int | None = None) -> QualityReport:
    """``pairs`` yields (subject, clean, test)."""
    rows = [QualityRow(str(name), psnr(c, t, per_frame=per_frame), ssim(c, t, window=window, per_frame=per_frame))
            for name, c, t in pairs]
    return QualityReport(rows)
