"""Tolerances, covariance distances, confidence intervals and rate fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

# Every Monte Carlo check allows this many standard errors.
CLT_Z = 4.0


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float


def frob_rel_dist(A, B) -> float:
    """Relative Frobenius distance ``||A - B|| / ||B||``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    denom = np.linalg.norm(B)
    if denom == 0:
        raise ValueError("reference matrix has zero norm")
    return float(np.linalg.norm(A - B) / denom)


def loglog_slope(points) -> FitResult:
    """Least squares fit of log y against log x."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    if len(np.unique(x)) != len(x):
        raise ValueError("x values must be distinct")
    res = _st.linregress(np.log(x), np.log(y))
    return FitResult(float(res.slope), float(res.intercept), float(res.stderr), float(res.rvalue**2))


def mean_ci(samples, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation CI: returns ``(mean, half_width)``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise ValueError("need at least 2 finite samples")
    z = _st.norm.ppf(0.5 + level / 2)
    return float(x.mean()), float(z * x.std(ddof=1) / np.sqrt(x.size))


def clt_tol(sd, m: int, z: float = CLT_Z):
    """Tolerance of ``z`` standard errors for a mean of ``m`` draws."""
    return z * np.asarray(sd, dtype=float) / np.sqrt(m)


def cis_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return abs(a[0] - b[0]) <= a[1] + b[1]
