"""Voxelwise OLS GLM, t thresholding and ROI-level scoring against ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from uwgan.phantom import GroundTruth, PhantomSpec, ball_mask, design_timecourse
from uwgan.volume import Volume3D, Volume4D


@dataclass(frozen=True)
class DesignMatrix:
    columns: np.ndarray  # (frames, p): task regressor, intercept

    def __post_init__(self):
        X = np.asarray(self.columns, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("design matrix must be 2D")
        if np.ptp(X[:, 0]) == 0:
            raise ValueError("task regressor is constant")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise ValueError("design matrix is rank deficient")
        object.__setattr__(self, "columns", X)

    @classmethod
    def from_regressor(cls, regressor) -> DesignMatrix:
        r = np.asarray(regressor, dtype=np.float64)
        return cls(np.column_stack([r, np.ones_like(r)]))

    @classmethod
    def from_phantom(cls, spec: PhantomSpec) -> DesignMatrix:
        return cls.from_regressor(design_timecourse(spec))

    @property
    def frames(self) -> int:
        return self.columns.shape[0]


@dataclass(frozen=True)
class GlmFit:
    beta: np.ndarray  # (p, x, y, z)
    sigma2: np.ndarray  # (x, y, z)
    t_map: np.ndarray  # (x, y, z); +/-inf marks exact fits
    dof: int


def fit_glm(vol, design: DesignMatrix, contrast=(1.0, 0.0), perfect_fit_rtol: float | None = None) -> GlmFit:
    """OLS per voxel: beta = (X'X)^-1 X'y, t = c'beta / sqrt(s2 c'(X'X)^-1 c), s2 = RSS/(n-p).

    A voxel whose residual std is at rounding level relative to its signal
    (``perfect_fit_rtol``, default 16 machine epsilons of the input dtype) is
    an exact fit: t is +inf / -inf by the sign of c'beta, or 0 when c'beta is
    itself at rounding level.
    """
    raw = vol.data if isinstance(vol, Volume4D) else np.asarray(vol)
    if perfect_fit_rtol is None:
        dtype = raw.dtype if np.issubdtype(raw.dtype, np.floating) else np.float64
        perfect_fit_rtol = 16 * float(np.finfo(dtype).eps)
    Y = np.asarray(raw, dtype=np.float64)
    X = design.columns
    n, p = X.shape
    if Y.shape[-1] != n:
        raise ValueError(f"volume has {Y.shape[-1]} frames, design has {n} rows")
    if n <= p:
        raise ValueError(f"need more frames ({n}) than regressors ({p})")
    c = np.asarray(contrast, dtype=np.float64)
    spatial = Y.shape[:-1]
    Yf = Y.reshape(-1, n).T  # (n, V)
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ Yf
    resid = Yf - X @ beta
    dof = n - p
    sigma2 = np.einsum("ij,ij->j", resid, resid) / dof
    effect = c @ beta
    se = np.sqrt(sigma2 * float(c @ xtx_inv @ c))

    scale = np.abs(Yf).max(axis=0)
    exact = np.sqrt(sigma2) <= perfect_fit_rtol * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        t = effect / se
    effect_negligible = np.abs(effect) * np.ptp(X @ c) <= perfect_fit_rtol * scale
    t = np.where(exact, np.where(effect_negligible, 0.0, np.sign(effect) * np.inf), t)
    return GlmFit(beta.reshape(p, *spatial), sigma2.reshape(spatial), t.reshape(spatial), dof)


def t_threshold(alpha: float, dof: int) -> float:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return float(stats.t.isf(alpha, dof))


def threshold_map(t_map: np.ndarray, alpha: float, dof: int) -> np.ndarray:
    """One-sided, uncorrected: t > t_{1-alpha, dof}. +inf always passes."""
    thr = t_threshold(alpha, dof)
    t = np.asarray(t_map)
    return (t > thr) | np.isposinf(t)


@dataclass(frozen=True)
class RoiScore:
    name: str
    activated: bool
    voxels: int
    pct_significant: float
    pct_ground_truth: float
    deviation: float
    weight: float


@dataclass(frozen=True)
class GlmReport:
    threshold: float
    alpha: float
    dof: int
    rois: list[RoiScore]
    weighted_deviation: float
    dice: float
    significant_voxels: int
    truth_voxels: int

    @property
    def control_false_positive_pct(self) -> dict[str, float]:
        return {r.name: r.pct_significant for r in self.rois if not r.activated}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control_false_positive_pct"] = self.control_false_positive_pct
        return d

    def write_json(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload["run"] = extra
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else float(2 * np.logical_and(a, b).sum() / total)


def score_rois(mask, truth: GroundTruth | Volume3D | np.ndarray, rois, grid=None, default_radius: float = 4.0,
               threshold: float = float("nan"), alpha: float = float("nan"), dof: int = 0) -> GlmReport:
    """Per-ROI significant / ground-truth percentages and the truth-weighted deviation.

    ``rois`` is a sequence of :class:`~uwgan.phantom.RoiCenter`; each ROI is a
    ball of ``roi.radius`` (or ``default_radius``) voxels around its center.
    """
    sig = np.asarray(mask.data if isinstance(mask, Volume3D) else mask).astype(bool)
    if isinstance(truth, GroundTruth):
        truth = truth.mask
    tru = np.asarray(truth.data if isinstance(truth, Volume3D) else truth).astype(bool)
    if sig.shape != tru.shape:
        raise ValueError(f"mask {sig.shape} and truth {tru.shape} are on different grids")
    grid = sig.shape if grid is None else tuple(grid)
    n_truth = int(tru.sum())
    scores = []
    for roi in rois:
        radius = roi.radius if roi.radius is not None else default_radius
        ball = ball_mask(grid, roi.center_voxel, radius)
        size = int(ball.sum())
        if size == 0:
            raise ValueError(f"ROI {roi.name} is empty")
        pct_sig = 100.0 * np.logical_and(sig, ball).sum() / size
        in_truth = int(np.logical_and(tru, ball).sum())
        pct_truth = 100.0 * in_truth / size
        weight = in_truth / n_truth if n_truth else 0.0
        scores.append(RoiScore(roi.name, roi.amplitude > 0, size, float(pct_sig), float(pct_truth),
                               float(pct_sig - pct_truth), float(weight)))
    weighted = float(sum(s.weight * abs(s.deviation) for s in scores))
    return GlmReport(threshold, alpha, dof, scores, weighted, dice(sig, tru), int(sig.sum()), n_truth)


def analyze_phantom(vol: Volume4D, truth: GroundTruth, spec: PhantomSpec, alpha: float = 0.05) -> tuple[GlmFit, GlmReport]:
    """Design from the phantom's block timing, fit, threshold, score."""
    fit = fit_glm(vol, DesignMatrix.from_phantom(spec))
    mask = threshold_map(fit.t_map, alpha, fit.dof)
    report = score_rois(mask, truth, spec.rois, spec.grid, spec.spatial_sigma_voxels,
                        threshold=t_threshold(alpha, fit.dof), alpha=alpha, dof=fit.dof)
    return fit, report
