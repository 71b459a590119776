"""Coupling of Gaussian MSGD with its diffusion limit.

The SDE ``dTheta = -grad L(Theta) dt + sqrt(eta) D(Theta) dW`` with diffusion
``D(theta) = G(theta) / sqrt(b N)`` is integrated by Euler-Maruyama on a fine
grid ``h = eta / m``. The Gaussian MSGD iterate uses, on each coarse step, the
sum of the ``m`` fine Brownian increments, so both paths see one Brownian motion:

    theta_{k+1} = theta_k - eta grad L(theta_k) + sqrt(eta) D(theta_k) (W_{(k+1)eta} - W_{k eta})
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from msgd.models import Dataset, LinearRegression, Model
from msgd.rng import RngStream
from msgd.stats import FitResult, loglog_slope, mean_ci

_CHUNK = 64


@dataclass
class CoupledPaths:
    eta: float
    m: int
    discrete: np.ndarray  # (K+1, d)
    fine: np.ndarray  # (K+1, d), fine path sampled at coarse times
    fine_increments: np.ndarray  # (K, m, N)
    coarse_increments: np.ndarray  # (K, N)
    squared_errors: np.ndarray  # (K+1,)

    @property
    def max_sq_error(self) -> float:
        return float(self.squared_errors.max())


@dataclass
class StrongErrorCurve:
    etas: np.ndarray
    mean_max_sq_error: np.ndarray
    ci_half_width: np.ndarray
    trials: int
    per_trial: np.ndarray  # (len(etas), trials)
    fit: FitResult | None = None
    rows: list = field(default_factory=list)


def _n_steps(eta: float, T: float) -> int:
    k = int(round(T / eta))
    if k < 1 or not np.isclose(k * eta, T, rtol=1e-9, atol=1e-12):
        raise ValueError(f"horizon T={T} is not a whole number of steps eta={eta}")
    return k


def _drift_diffusion(model, thetas, data, b, scale):
    G = model.gradient_matrices(thetas, data)
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite gradient matrix")
    return G.mean(axis=2), scale * G / np.sqrt(b * data.n)


def _simulate(model, data, theta0, eta, m, T, b, streams, keep=False, scale=1.0):
    K = _n_steps(eta, T)
    if m < 1:
        raise ValueError(f"refinement factor must be >= 1, got {m}")
    model.gradient_matrix(np.asarray(theta0, dtype=float), data)  # size guard
    S, N = len(streams), data.n
    h = eta / m
    coarse = np.tile(np.asarray(theta0, dtype=float), (S, 1))
    fine = coarse.copy()
    sq = np.zeros((S, K + 1))
    kept = {"discrete": [coarse[0].copy()], "fine": [fine[0].copy()], "dW": [], "DW": []}
    k = 0
    while k < K:
        c = min(_CHUNK, K - k)
        dW = np.stack([s.normal((c, m, N)) for s in streams], axis=1) * np.sqrt(h)
        for j in range(c):
            inc = dW[j]  # (S, m, N)
            for i in range(m):
                g, D = _drift_diffusion(model, fine, data, b, scale)
                fine = fine - h * g + np.sqrt(eta) * np.einsum("sdn,sn->sd", D, inc[:, i])
            total = inc.sum(axis=1)
            g, D = _drift_diffusion(model, coarse, data, b, scale)
            coarse = coarse - eta * g + np.sqrt(eta) * np.einsum("sdn,sn->sd", D, total)
            if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))):
                raise FloatingPointError("coupled paths left the finite range")
            k += 1
            sq[:, k] = np.sum((fine - coarse) ** 2, axis=1)
            if keep:
                kept["discrete"].append(coarse[0].copy())
                kept["fine"].append(fine[0].copy())
                kept["dW"].append(inc[0].copy())
                kept["DW"].append(total[0].copy())
    return sq, kept


def simulate_coupled(
    model: Model,
    data: Dataset,
    theta0,
    eta: float,
    m: int,
    T: float,
    b: int,
    s: RngStream,
    diffusion_scale: float = 1.0,
) -> CoupledPaths:
    """One coupled pair of paths. ``diffusion_scale=0`` turns both into plain Euler schemes."""
    sq, kept = _simulate(model, data, theta0, eta, m, T, b, [s], keep=True, scale=diffusion_scale)
    N = data.n
    return CoupledPaths(
        eta=eta,
        m=m,
        discrete=np.array(kept["discrete"]),
        fine=np.array(kept["fine"]),
        fine_increments=np.array(kept["dW"]).reshape(-1, m, N),
        coarse_increments=np.array(kept["DW"]).reshape(-1, N),
        squared_errors=sq[0],
    )


def max_sq_errors(model, data, theta0, eta, m, T, b, streams, diffusion_scale=1.0) -> np.ndarray:
    """``max_k |Theta_{k eta} - theta_k|^2`` for each independent trial stream."""
    sq, _ = _simulate(model, data, theta0, eta, m, T, b, streams, scale=diffusion_scale)
    return sq.max(axis=1)


def strong_error_curve(
    model: Model, data: Dataset, theta0, etas, m: int, T: float, b: int, trials: int, s: RngStream
) -> StrongErrorCurve:
    etas = np.asarray(etas, dtype=float)
    if np.any(np.diff(etas) >= 0):
        raise ValueError("step sizes must be strictly decreasing")
    per = np.empty((len(etas), trials))
    rows = []
    for i, eta in enumerate(etas):
        streams = [s.spawn(f"eta={eta!r}/trial={t}") for t in range(trials)]
        per[i] = max_sq_errors(model, data, theta0, eta, m, T, b, streams)
        rows.extend({"eta": float(eta), "trial": t, "max_sq_error": float(e)} for t, e in enumerate(per[i]))
    stats = [mean_ci(row) for row in per]
    means = np.array([x[0] for x in stats])
    fit = loglog_slope(np.column_stack([etas, means])) if len(etas) >= 3 else None
    return StrongErrorCurve(
        etas=etas,
        mean_max_sq_error=means,
        ci_half_width=np.array([x[1] for x in stats]),
        trials=trials,
        per_trial=per,
        fit=fit,
        rows=rows,
    )


def least_squares_problem(s: RngStream, N: int = 10, d: int = 2, l2: float = 0.1, noise: float = 0.3):
    """Ridge-regularized least squares on ``N`` Gaussian points; returns ``(model, data, optimum)``.

    Gradients are globally Lipschitz and, on any bounded region, per-sample
    gradients are bounded, which is what the order argument needs.
    """
    X = s.spawn("X").normal((N, d))
    y = X @ np.linspace(1.0, -0.5, d) + noise * s.spawn("y").normal(N)
    model = LinearRegression(l2=l2)
    opt = np.linalg.solve(X.T @ X / N + l2 * np.eye(d), X.T @ y / N)
    return model, Dataset(X, y), opt
