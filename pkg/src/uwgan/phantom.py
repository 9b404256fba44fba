"""Synthetic activation phantoms with known ground truth.

A phantom is a baseline image modulated by Gaussian activation blobs whose
time course is an on/off block design convolved with a double-gamma HRF,
plus Gaussian noise at a target SNR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter

from uwgan.noise import SnrSpec, add_gaussian_snr, make_rng
from uwgan.volume import Volume3D, Volume4D


class HrfSpec(BaseModel):
    """Double-gamma HRF; each lobe is (t/d)^(d/b) exp(-(t-d)/b), peaking at t = d."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_delay: float = 2.8
    undershoot_delay: float = 7.0
    peak_dispersion: float = 0.8
    undershoot_dispersion: float = 1.2
    undershoot_ratio: float = 0.1
    length_seconds: float = 20.0

    @model_validator(mode="after")
    def _check(self):
        if self.peak_dispersion <= 0 or self.undershoot_dispersion <= 0:
            raise ValueError("HRF dispersions must be positive")
        if self.peak_delay <= 0 or self.undershoot_delay <= 0:
            raise ValueError("HRF delays must be positive")
        if self.length_seconds < self.peak_delay:
            raise ValueError("HRF kernel length shorter than its peak delay")
        return self

    def response(self, t) -> np.ndarray:
        t = np.maximum(np.asarray(t, dtype=np.float64), 0.0)

        def lobe(d, b):
            return (t / d) ** (d / b) * np.exp(-(t - d) / b)

        return lobe(self.peak_delay, self.peak_dispersion) - self.undershoot_ratio * lobe(
            self.undershoot_delay, self.undershoot_dispersion)


class RoiCenter(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    center_voxel: tuple[int, int, int]
    amplitude: float = Field(1.0, ge=0)
    radius: float | None = None  # scoring radius; defaults to the spatial sigma


DEFAULT_ROIS = (
    RoiCenter(name="superior_colliculus", center_voxel=(48, 40, 11), amplitude=1.0),
    RoiCenter(name="visual_cortex_1", center_voxel=(30, 62, 11), amplitude=1.0),
    RoiCenter(name="visual_cortex_2", center_voxel=(66, 62, 11), amplitude=1.0),
    RoiCenter(name="anterior_pretectal_nucleus", center_voxel=(48, 18, 11), amplitude=0.0),
    RoiCenter(name="parietal_cortex", center_voxel=(15, 35, 11), amplitude=0.0),
)


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: tuple[int, int, int] = (96, 96, 22)
    tr_seconds: float = Field(3.0, gt=0)
    on_seconds: float = Field(30.0, ge=0)
    off_seconds: float = Field(60.0, ge=0)
    cycles: int = Field(10, ge=1)
    spatial_sigma_voxels: float = Field(4.0, gt=0)
    peak_fraction: float = 0.10
    baseline: float = Field(1.0, gt=0)
    rois: tuple[RoiCenter, ...] = DEFAULT_ROIS
    hrf: HrfSpec = HrfSpec()
    snr_db: float = 30.0
    seed: int = 0
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @model_validator(mode="after")
    def _check(self):
        frames = self.cycles * (self.on_seconds + self.off_seconds) / self.tr_seconds
        if frames < 1 or abs(frames - round(frames)) > 1e-9:
            raise ValueError(f"cycles*(on+off)/tr = {frames} is not a positive integer frame count")
        for roi in self.rois:
            if not all(0 <= c < g for c, g in zip(roi.center_voxel, self.grid)):
                raise ValueError(f"ROI {roi.name} center {roi.center_voxel} outside grid {self.grid}")
        return self

    @property
    def frames(self) -> int:
        return int(round(self.cycles * (self.on_seconds + self.off_seconds) / self.tr_seconds))

    def roi_radius(self, roi: RoiCenter) -> float:
        return roi.radius if roi.radius is not None else self.spatial_sigma_voxels


@dataclass(frozen=True)
class GroundTruth:
    mask: Volume3D
    roi_voxel_counts: dict[str, int]


def hrf_kernel(spec: HrfSpec, tr: float) -> np.ndarray:
    """HRF sampled every ``tr`` seconds over its length, scaled to peak 1."""
    if not tr > 0:
        raise ValueError(f"tr must be positive, got {tr}")
    t = np.arange(0.0, spec.length_seconds + 1e-9, tr)
    k = spec.response(t)
    return k / k.max()


def boxcar(spec: PhantomSpec) -> np.ndarray:
    t = np.arange(spec.frames) * spec.tr_seconds
    period = spec.on_seconds + spec.off_seconds
    return (np.mod(t, period) < spec.on_seconds).astype(np.float64)


def design_timecourse(spec: PhantomSpec, kernel: np.ndarray | None = None) -> np.ndarray:
    """Block design convolved with the HRF, truncated to the frame count, max-normalised to 1."""
    kernel = hrf_kernel(spec.hrf, spec.tr_seconds) if kernel is None else np.asarray(kernel, dtype=np.float64)
    tc = np.convolve(boxcar(spec), kernel)[: spec.frames]
    peak = tc.max()
    return tc / peak if peak > 0 else tc


def _sq_distance(grid, center) -> np.ndarray:
    axes = [np.arange(g, dtype=np.float64) - c for g, c in zip(grid, center)]
    return axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2


def ball_mask(grid, center, radius: float) -> np.ndarray:
    if radius < 0:
        return np.zeros(tuple(grid), bool)
    return _sq_distance(grid, center) <= radius**2


def activation_map(spec: PhantomSpec) -> np.ndarray:
    """Sum over ROIs of amplitude * exp(-d^2 / 2 sigma^2)."""
    out = np.zeros(spec.grid, dtype=np.float64)
    two_s2 = 2 * spec.spatial_sigma_voxels**2
    for roi in spec.rois:
        if roi.amplitude > 0:
            out += roi.amplitude * np.exp(-_sq_distance(spec.grid, roi.center_voxel) / two_s2)
    return out


def ground_truth(spec: PhantomSpec) -> GroundTruth:
    """Union of balls of radius sigma around activated centers."""
    mask = np.zeros(spec.grid, dtype=bool)
    counts = {}
    for roi in spec.rois:
        ball = ball_mask(spec.grid, roi.center_voxel, spec.spatial_sigma_voxels)
        if roi.amplitude > 0:
            mask |= ball
            counts[roi.name] = int(ball.sum())
        else:
            counts[roi.name] = 0
    return GroundTruth(Volume3D(mask.astype(np.float32)), counts)


def noise_free_phantom(spec: PhantomSpec, background=None) -> np.ndarray:
    """baseline * (1 + peak_fraction * timecourse(t) * activation(p)), float64 (x, y, z, t)."""
    tc = design_timecourse(spec)
    act = activation_map(spec)
    if background is None:
        base = spec.baseline
    else:
        base = np.asarray(background.data if isinstance(background, (Volume3D, Volume4D)) else background, dtype=np.float64)
        if base.ndim == 3:
            base = base[..., None]
        if base.shape[:3] != tuple(spec.grid) or base.shape[3] not in (1, spec.frames):
            raise ValueError(f"background shape {base.shape} incompatible with grid {spec.grid} x {spec.frames}")
    return base * (1.0 + spec.peak_fraction * act[..., None] * tc[None, None, None, :])


def generate_phantom(spec: PhantomSpec, background=None) -> tuple[Volume4D, GroundTruth]:
    vol = Volume4D(noise_free_phantom(spec, background), spec.voxel_size_mm, spec.tr_seconds)
    if not (math.isinf(spec.snr_db) and spec.snr_db > 0):
        vol = add_gaussian_snr(vol, SnrSpec(snr_db=spec.snr_db, seed=spec.seed))
    return vol, ground_truth(spec)


# --- synthetic subjects ------------------------------------------------------------

class SubjectSpec(BaseModel):
    """Brain-like synthetic subject used in place of acquired scans.

    An ellipsoidal head with smooth low-contrast tissue texture, a few
    activation blobs driven by a block design, and a slow global drift.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: tuple[int, int, int] = (64, 64, 8)
    tr_seconds: float = 3.0
    on_seconds: float = 30.0
    off_seconds: float = 30.0
    cycles: int = 2
    texture_sigma_voxels: float = 3.0
    texture_contrast: float = 0.15
    n_activations: int = 3
    peak_fraction: float = 0.10


def simulate_subject(spec: SubjectSpec, seed: int) -> Volume4D:
    rng = make_rng(seed)
    m, n, q = spec.grid
    x = (np.arange(m) - (m - 1) / 2) / (m / 2)
    y = (np.arange(n) - (n - 1) / 2) / (n / 2)
    z = (np.arange(q) - (q - 1) / 2) / max(q / 2, 1)
    rx, ry, rz = rng.uniform(0.75, 0.92, size=3)
    r2 = (x[:, None, None] / rx) ** 2 + (y[None, :, None] / ry) ** 2 + (z[None, None, :] / max(rz, 1.0)) ** 2
    head = 1.0 / (1.0 + np.exp((np.sqrt(r2) - 1.0) / 0.04))
    texture = gaussian_filter(rng.standard_normal(spec.grid), spec.texture_sigma_voxels, mode="wrap")
    texture /= texture.std()
    anatomy = head * (0.7 + spec.texture_contrast * np.clip(texture, -2.5, 2.5)) + 0.02

    phantom = PhantomSpec(
        grid=spec.grid, tr_seconds=spec.tr_seconds, on_seconds=spec.on_seconds, off_seconds=spec.off_seconds,
        cycles=spec.cycles, spatial_sigma_voxels=3.0, peak_fraction=spec.peak_fraction, rois=tuple(
            RoiCenter(name=f"act{i}", center_voxel=tuple(int(rng.integers(g // 4, max(g - g // 4, g // 4 + 1))) for g in spec.grid))
            for i in range(spec.n_activations)),
        snr_db=math.inf,
    )
    frames = phantom.frames
    drift = 1.0 + 0.02 * np.sin(2 * np.pi * (np.arange(frames) / frames + rng.uniform()))
    data = noise_free_phantom(phantom, anatomy) * drift[None, None, None, :]
    return Volume4D(data, (1.0, 1.0, 1.0), spec.tr_seconds)
