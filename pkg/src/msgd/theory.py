"""Online least squares with averaged iterates: small-batch SGD against large-batch MSGD.

Each iteration draws a fresh batch from the data distribution and applies

    theta <- theta - eta * sum_r w_r (x_r x_r^T theta - y_r x_r)

with ``w = 1/b`` for small-batch SGD, or batch-``B`` weights whose covariance is
``(B-b)/(b B (B-1)) (I - 11^T/B)`` for the large-batch kinds. The estimator is
the running average of ``theta_0 .. theta_n``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from msgd.noise import Kind, SamplingSpec, draw_sampling_vectors
from msgd.rng import RngStream

_CHUNK = 512


class OnlineKind(str, enum.Enum):
    SMALL_BATCH_SGD = "SmallBatchSgd"
    THEOREM_SUBSAMPLE = "TheoremSubsample"
    THEOREM_GAUSSIAN = "TheoremGaussian"


class StepSizeError(ValueError):
    pass


@dataclass
class RegressionProblem:
    Sigma: np.ndarray
    theta_star: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        if self.Sigma.shape != (self.theta_star.size, self.theta_star.size):
            raise ValueError("Sigma and theta_star dimensions disagree")
        if not np.allclose(self.Sigma, self.Sigma.T):
            raise ValueError("Sigma must be symmetric")
        eig = np.linalg.eigvalsh(self.Sigma)
        if eig[0] <= 0:
            raise ValueError("Sigma must be positive definite")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        self._eig = eig

    @property
    def dim(self) -> int:
        return self.theta_star.size

    @property
    def lam(self) -> float:
        """Smallest valid ``lambda`` with ``Sigma <= lambda I``."""
        return float(self._eig[-1])

    @property
    def R2(self) -> float:
        """For Gaussian x, ``E |x|^2 x x^T = tr(Sigma) Sigma + 2 Sigma^2 <= (tr Sigma + 2 lambda_max) Sigma``."""
        return float(np.trace(self.Sigma) + 2 * self._eig[-1])

    def to_dict(self) -> dict:
        return {
            "Sigma": self.Sigma.tolist(),
            "theta_star": self.theta_star.tolist(),
            "sigma2": float(self.sigma2),
            "R2": self.R2,
            "lambda": self.lam,
        }


@dataclass(frozen=True)
class BoundConstants:
    C1: float
    C2: float


@dataclass
class AveragedRun:
    kind: str
    B: int
    b: int
    eta: float
    n: int
    log_n: np.ndarray
    excess_risk: np.ndarray
    theta_bar: np.ndarray
    labels: list = field(default_factory=list)


def stability_limit(problem: RegressionProblem, b: int) -> float:
    return 2 * b / (problem.R2 + (b - 1) * problem.lam)


def _check_eta(problem, b, eta):
    limit = stability_limit(problem, b)
    if not 0 < eta < limit:
        raise StepSizeError(
            f"step size {eta} violates the stability condition eta < 2b/(R2+(b-1)lambda) = {limit:.6g}"
        )


def excess_risk(theta, problem: RegressionProblem):
    """``0.5 (theta - theta*)^T Sigma (theta - theta*)``; vectorized over leading axes."""
    delta = np.asarray(theta, dtype=float) - problem.theta_star
    return 0.5 * np.einsum("...i,ij,...j->...", delta, problem.Sigma, delta)


def bound_constants(problem: RegressionProblem, b: int, eta: float, theta0) -> BoundConstants:
    _check_eta(problem, b, eta)
    d = problem.dim
    kappa = (problem.R2 + (b - 1) * problem.lam) / b
    delta = np.asarray(theta0, dtype=float) - problem.theta_star
    q = float(delta @ np.linalg.solve(problem.Sigma, delta))
    c1 = problem.sigma2 * d / (2 - eta * kappa)
    c2 = 0.5 * (1 + kappa * eta * d / 2) * q / eta**2
    return BoundConstants(c1, c2)


def theorem1_bound(problem: RegressionProblem, b: int, eta: float, theta0, n):
    """Upper bound on the expected excess risk of the averaged iterate after ``n`` steps."""
    c = bound_constants(problem, b, eta, theta0)
    n = np.asarray(n, dtype=float)
    return c.C1 / (n + 1) + c.C2 / (n + 1) ** 2


def _batch_size(kind: OnlineKind, B: int, b: int) -> int:
    return b if kind is OnlineKind.SMALL_BATCH_SGD else B


def _weights(kind, B, b, s: RngStream, k: int) -> np.ndarray:
    if kind is OnlineKind.SMALL_BATCH_SGD:
        return np.full((k, b), 1.0 / b)
    spec = SamplingSpec(n=B, b=b, B=B, kind=Kind(kind.value))
    return draw_sampling_vectors(spec, s, k)


def run_online_batch(
    problem: RegressionProblem,
    B: int,
    b: int,
    eta: float,
    n: int,
    kind,
    streams: list[RngStream],
    theta0=None,
    log_n=None,
) -> AveragedRun:
    """Independent replicas, one per stream, advanced together.

    Returns excess risk of the averaged iterate, shape ``(len(streams), len(log_n))``.
    """
    kind = OnlineKind(kind)
    if kind is not OnlineKind.SMALL_BATCH_SGD and not 1 <= b <= B:
        raise ValueError(f"need 1 <= b <= B, got b={b}, B={B}")
    _check_eta(problem, b, eta)
    p = problem.dim
    m = _batch_size(kind, B, b)
    chol = np.linalg.cholesky(problem.Sigma)
    sd = np.sqrt(problem.sigma2)
    theta0 = np.zeros(p) if theta0 is None else np.asarray(theta0, dtype=float)
    log_n = np.unique(np.asarray([n] if log_n is None else log_n, dtype=int))
    if log_n[0] < 0 or log_n[-1] > n:
        raise ValueError("logged iterations must lie in [0, n]")

    S = len(streams)
    theta = np.tile(theta0, (S, 1))
    theta_bar = theta.copy()
    out = np.empty((S, len(log_n)))
    j = 0
    if log_n[0] == 0:
        out[:, 0] = excess_risk(theta_bar, problem)
        j = 1
    data_s = [s.spawn("data") for s in streams]
    weight_s = [s.spawn("weights") for s in streams]
    it = 0
    while it < n:
        k = min(_CHUNK, n - it)
        X = np.stack([ds.normal((k, m, p)) for ds in data_s], axis=1) @ chol.T
        eps = np.stack([ds.normal((k, m)) for ds in data_s], axis=1)
        Y = X @ problem.theta_star + sd * eps
        W = np.stack([_weights(kind, B, b, ws, k) for ws in weight_s], axis=1)
        for t in range(k):
            x = X[t]
            resid = np.einsum("smp,sp->sm", x, theta) - Y[t]
            theta = theta - eta * np.einsum("sm,smp->sp", W[t] * resid, x)
            it += 1
            theta_bar = (it * theta_bar + theta) / (it + 1)
            if j < len(log_n) and log_n[j] == it:
                out[:, j] = excess_risk(theta_bar, problem)
                j += 1
    return AveragedRun(
        kind=kind.value,
        B=B,
        b=b,
        eta=eta,
        n=n,
        log_n=log_n,
        excess_risk=out,
        theta_bar=theta_bar,
        labels=[s.stream_label for s in streams],
    )


def run_online_recursion(
    problem: RegressionProblem, B: int, b: int, eta: float, n: int, kind, s: RngStream, theta0=None, log_n=None
) -> AveragedRun:
    """A single replica; see :func:`run_online_batch`."""
    run = run_online_batch(problem, B, b, eta, n, kind, [s], theta0=theta0, log_n=log_n)
    run.excess_risk = run.excess_risk[0]
    run.theta_bar = run.theta_bar[0]
    return run


def expected_excess_risk(problem: RegressionProblem, b: int, eta: float, theta0, log_n) -> np.ndarray:
    """Exact ``E f(theta_bar_n) - f(theta*)`` for Gaussian design, by propagating second moments.

    Every kind with weight moments ``E w = 1/B``, ``E w^2 = 1/(bB)`` and
    ``E w_r w_s = (b-1)/(bB(B-1))`` (small-batch SGD included) gives the same
    moment recursion, so this serves all of them. Uses Isserlis' identity
    ``E x x^T P x x^T = 2 Sigma P Sigma + tr(Sigma P) Sigma``.
    """
    mu, U = np.linalg.eigh(problem.Sigma)
    S = np.diag(mu)
    d0 = U.T @ (np.asarray(theta0, dtype=float) - problem.theta_star)
    log_n = np.asarray(log_n, dtype=int)
    n_max = int(log_n.max())
    P = np.outer(d0, d0)
    diag = np.empty((n_max + 1, mu.size))
    noise = eta**2 * problem.sigma2 * S / b
    for k in range(n_max + 1):
        diag[k] = np.diag(P)
        SPS = S @ P @ S
        quad = (2 * SPS + np.trace(S @ P) * S) / b + (b - 1) / b * SPS
        P = P - eta * (S @ P + P @ S) + eta**2 * quad + noise
    r = 1.0 - eta * mu
    out = np.empty(len(log_n))
    for i, n in enumerate(log_n):
        k = np.arange(n + 1)
        geo = r * (1.0 - r[None, :] ** (n - k)[:, None]) / eta
        total = np.sum(diag[: n + 1] @ mu) + 2.0 * np.sum(diag[: n + 1] * geo)
        out[i] = 0.5 * total / (n + 1) ** 2
    return out
