"""Map agreement (NCC, PSNR), image similarity (SSIM) and binary classification metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from .errors import ConstantInput, ShapeMismatch, SingleClass, VolumeTooSmall

DEFAULT_PEAK = 2.0
SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03


def _array(a) -> np.ndarray:
    return np.asarray(getattr(a, "data", a), dtype=np.float64)


def _pair(a, b):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ncc(pred, truth) -> float:
    """Zero-normalized cross-correlation (population standard deviations)."""
    a, b = _pair(pred, truth)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise ConstantInput("NCC is undefined for a constant input")
    r = np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb)
    return float(np.clip(r, -1.0, 1.0))


def psnr(pred, truth, peak: float = DEFAULT_PEAK) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical inputs."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(pred, truth)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def ssim(a, b, peak: float = DEFAULT_PEAK, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over a sliding cubic window (sample covariances, border cropped).

    The window shrinks to the largest odd size that fits the smallest side.
    """
    a, b = _pair(a, b)
    win = min(window, min(a.shape) if min(a.shape) % 2 else min(a.shape) - 1)
    if win < 3:
        raise VolumeTooSmall(f"volume {a.shape} cannot hold a 3-voxel window")
    n = win**a.ndim
    cov_norm = n / (n - 1)
    f = lambda v: uniform_filter(v, size=win, mode="reflect")
    ux, uy = f(a), f(b)
    uxx, uyy, uxy = f(a * a), f(b * b), f(a * b)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    core = s[tuple(slice(pad, dim - pad) for dim in s.shape)]
    return float(core.mean())


@dataclass(frozen=True)
class ClassificationMetrics:
    auc: float
    acc: float
    sensitivity: float
    specificity: float


def auc_score(scores, labels) -> float:
    """Rank-statistic AUC; tied positive/negative pairs earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationMetrics:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch("scores and labels differ in length")
    auc = auc_score(s, y)
    pred = s >= threshold
    tp, tn = int(np.sum(pred & y)), int(np.sum(~pred & ~y))
    return ClassificationMetrics(
        auc=auc,
        acc=(tp + tn) / len(y),
        sensitivity=tp / int(y.sum()),
        specificity=tn / int((~y).sum()),
    )


def summarize(values) -> dict:
    """Median and quartiles (box-plot statistics); ``inf`` is kept, NaN entries are dropped."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return {"n": 0, "median": math.nan, "q1": math.nan, "q3": math.nan, "min": math.nan, "max": math.nan}
    method = "linear" if np.all(np.isfinite(v)) else "nearest"
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method=method)
    return {"n": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


@dataclass
class MetricReport:
    ncc: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim_trace: list = field(default_factory=list)
    classification: ClassificationMetrics | None = None
    peak: float = DEFAULT_PEAK

    def summary(self) -> dict:
        return {"ncc": summarize(self.ncc), "psnr": summarize(self.psnr)}
