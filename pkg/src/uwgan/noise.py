"""Rician corruption and SNR-calibrated Gaussian noise.

All randomness comes from numpy's Philox counter-based bit generator keyed by
the noise spec's seed (`RicianSpec.seed`, `SnrSpec.seed`), so outputs are reproducible bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from uwgan.volume import Volume4D

RNG_ALGORITHM = "numpy.random.Philox"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


class RicianSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    delta: float = Field(gt=0, le=1)
    seed: int = 0


class SnrSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    snr_db: float
    seed: int = 0


def rician_magnitude(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """sqrt((v + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma^2), in float64."""
    v = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return np.abs(v)
    n1 = rng.standard_normal(v.shape) * sigma
    n2 = rng.standard_normal(v.shape) * sigma
    return np.hypot(v + n1, n2)


def add_rician(vol: Volume4D, spec: RicianSpec) -> Volume4D:
    """Corrupt ``vol`` with Rician noise of std ``delta * intensity_max``."""
    if not spec.delta > 0:
        raise ValueError(f"delta must be positive, got {spec.delta}")
    sigma = spec.delta * vol.intensity_max
    return vol.with_data(rician_magnitude(vol.data, sigma, make_rng(spec.seed)))


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return math.sqrt(float(np.mean(x * x)))


def snr_noise_std(signal: np.ndarray, snr_db: float) -> float:
    return rms(signal) / 10 ** (snr_db / 20)


def measured_snr_db(signal: np.ndarray, noisy: np.ndarray) -> float:
    """10 log10(P_signal / P_noise) with powers as mean squares."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - signal
    return 10 * math.log10(np.mean(signal**2) / np.mean(noise**2))


def add_gaussian_snr(vol: Volume4D, spec: SnrSpec) -> Volume4D:
    """Add white Gaussian noise scaled so the signal/noise power ratio hits ``snr_db``."""
    if rms(vol.data) == 0:
        raise ValueError("cannot calibrate SNR on an all-zero signal")
    if math.isinf(spec.snr_db) and spec.snr_db > 0:
        return vol
    std = snr_noise_std(vol.data, spec.snr_db)
    noise = make_rng(spec.seed).standard_normal(vol.data.shape) * std
    return vol.with_data(vol.data.astype(np.float64) + noise)
