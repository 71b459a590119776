"""Sampling vectors, sampling noises and their first two moments.

A sampling vector ``W`` weights the per-sample losses; its mean is the uniform
vector ``1/len(W)``. The sampling noise is ``V = W - 1/len(W)``, so the
stochastic gradient is ``G @ W = grad L + G @ V`` for a gradient matrix ``G``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from msgd.rng import RngStream
from msgd.stats import frob_rel_dist


class Kind(str, enum.Enum):
    SGD_WITH_REPLACEMENT = "SgdWithReplacement"
    SGD_WITHOUT_REPLACEMENT = "SgdWithoutReplacement"
    GAUSSIAN_COV = "GaussianCov"
    GAUSSIAN_FISHER = "GaussianFisher"
    BERNOULLI = "Bernoulli"
    SPARSE_GAUSSIAN_FISHER = "SparseGaussianFisher"
    THEOREM_SUBSAMPLE = "TheoremSubsample"
    THEOREM_GAUSSIAN = "TheoremGaussian"


# Kinds whose weights live on a fresh batch of size B rather than on the n losses.
BATCH_KINDS = (Kind.THEOREM_SUBSAMPLE, Kind.THEOREM_GAUSSIAN)
NEEDS_B = (Kind.SPARSE_GAUSSIAN_FISHER, *BATCH_KINDS)


@dataclass(frozen=True)
class SamplingSpec:
    n: int
    b: int
    kind: Kind = Kind.SGD_WITH_REPLACEMENT
    B: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.b < 1:
            raise ValueError(f"batch size b must be >= 1, got {self.b}")
        if self.kind in NEEDS_B:
            if self.B is None:
                raise ValueError(f"{self.kind.value} needs the outer batch size B")
            if not 1 <= self.b <= self.B:
                raise ValueError(f"need 1 <= b <= B, got b={self.b}, B={self.B}")
        if self.kind not in BATCH_KINDS and not 1 <= self.b <= self.n:
            raise ValueError(f"need 1 <= b <= n, got b={self.b}, n={self.n}")

    @property
    def length(self) -> int:
        """Number of weights in one sampling vector."""
        return self.B if self.kind in BATCH_KINDS else self.n


def _centering(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def with_replacement_factor(n: int, b: int) -> float:
    return 1.0 / (b * n)


def without_replacement_factor(n: int, b: int) -> float:
    if n == b:
        return 0.0
    return (n - b) / (b * n * (n - 1))


def theoretical_sampling_cov(spec: SamplingSpec) -> np.ndarray:
    """Closed-form covariance of the sampling noise of ``spec``."""
    n, b, kind = spec.n, spec.b, spec.kind
    if kind is Kind.SGD_WITH_REPLACEMENT or kind is Kind.GAUSSIAN_COV:
        return with_replacement_factor(n, b) * _centering(n)
    if kind is Kind.SGD_WITHOUT_REPLACEMENT:
        return without_replacement_factor(n, b) * _centering(n)
    if kind is Kind.GAUSSIAN_FISHER:
        return np.eye(n) / (b * n)
    if kind is Kind.BERNOULLI:
        return (n - b) / (b * n**2) * np.eye(n)
    if kind is Kind.SPARSE_GAUSSIAN_FISHER:
        # independent eps kills every off-diagonal term; only the SGD(b) diagonal survives
        return (1.0 - 1.0 / n) / (b * n) * np.eye(n)
    B = spec.B
    return without_replacement_factor(B, b) * _centering(B)


def _with_replacement(n: int, b: int, s: RngStream, m: int) -> np.ndarray:
    idx = s.integers(n, (m, b)) + n * np.arange(m)[:, None]
    counts = np.bincount(idx.ravel(), minlength=m * n).reshape(m, n)
    return counts / b


def _subset(n: int, b: int, s: RngStream, m: int) -> np.ndarray:
    w = np.zeros((m, n))
    if b == n:
        w[:] = 1.0 / b
        return w
    keys = s.uniform((m, n))
    picked = np.argpartition(keys, b - 1, axis=1)[:, :b]
    np.put_along_axis(w, picked, 1.0 / b, axis=1)
    return w


def _centered_gaussian(length: int, s: RngStream, m: int) -> np.ndarray:
    eps = s.normal((m, length))
    # (I - 11^T/n) eps without forming the projector
    return eps - eps.mean(axis=1, keepdims=True)


def draw_sampling_vectors(spec: SamplingSpec, s: RngStream, m: int) -> np.ndarray:
    """``m`` independent sampling vectors, one per row."""
    n, b, kind = spec.n, spec.b, spec.kind
    if kind is Kind.SGD_WITH_REPLACEMENT:
        return _with_replacement(n, b, s, m)
    if kind is Kind.SGD_WITHOUT_REPLACEMENT:
        return _subset(n, b, s, m)
    if kind is Kind.GAUSSIAN_COV:
        return 1.0 / n + _centered_gaussian(n, s, m) / np.sqrt(b * n)
    if kind is Kind.GAUSSIAN_FISHER:
        return 1.0 / n + s.normal((m, n)) / np.sqrt(b * n)
    if kind is Kind.BERNOULLI:
        return (s.uniform((m, n)) < b / n) / b
    if kind is Kind.SPARSE_GAUSSIAN_FISHER:
        v_big = _with_replacement(n, spec.B, s, m) - 1.0 / n
        return 1.0 / n + np.sqrt(spec.B / b) * v_big * s.normal((m, n))
    B = spec.B
    if kind is Kind.THEOREM_SUBSAMPLE:
        return _subset(B, b, s, m)
    scale = np.sqrt(without_replacement_factor(B, b))
    return 1.0 / B + scale * _centered_gaussian(B, s, m)


def draw_sampling_vector(spec: SamplingSpec, s: RngStream) -> np.ndarray:
    return draw_sampling_vectors(spec, s, 1)[0]


def to_noise(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w - 1.0 / w.shape[-1]


def zero_noise_weights(n: int) -> np.ndarray:
    """The degenerate sampling vector: full-batch gradient descent."""
    return np.full(n, 1.0 / n)


def compensation_std(n: int, B: int, b: int) -> float:
    """Std of i.i.d. Gaussian batch weights that lift batch-``B`` SGD noise to batch ``b``.

    A batch of ``B`` drawn without replacement from ``n`` carries sampling noise
    with diagonal ``(n-B)/(B n (n-1)) (1 - 1/n)``. Adding ``c * eps`` on the
    batch entries contributes ``c**2 B/n`` on the diagonal; ``c`` is chosen so
    the total diagonal equals that of with-replacement SGD at batch ``b``.
    """
    if not 1 <= b <= B <= n:
        raise ValueError(f"need 1 <= b <= B <= n, got b={b}, B={B}, n={n}")
    target = (1.0 - 1.0 / n) / (b * n)
    present = without_replacement_factor(n, B) * (1.0 - 1.0 / n)
    return float(np.sqrt(max(target - present, 0.0) * n / B))


def centered_compensation_std(n: int, B: int, b: int) -> float:
    """Like :func:`compensation_std` but for centered Gaussian batch weights ``c (eps - mean eps)``.

    Averaged over the batch draw these contribute ``c**2 (B-1)/(n-1) (I - 11^T/n)``,
    the same shape as the SGD covariance, so the full matrix is matched.
    """
    if not 1 <= b <= B <= n or B < 2:
        raise ValueError(f"need 1 <= b <= B <= n and B >= 2, got b={b}, B={B}, n={n}")
    gap = 1.0 / (b * n) - without_replacement_factor(n, B)
    return float(np.sqrt(max(gap, 0.0) * (n - 1) / (B - 1)))


@dataclass
class MomentReport:
    kind: str
    n: int
    b: int
    B: int | None
    draw_count: int
    empirical_mean: list
    empirical_cov: list
    max_abs_mean_dev: float
    max_mean_z: float
    frob_rel_cov_dev: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def empirical_moments(spec: SamplingSpec, s: RngStream, m: int) -> MomentReport:
    """Sample mean and covariance of ``m`` noise draws against the closed form."""
    if m < 1000:
        raise ValueError(f"need at least 1000 draws, got {m}")
    v = to_noise(draw_sampling_vectors(spec, s, m))
    mean = v.mean(axis=0)
    cov = np.cov(v, rowvar=False, bias=False)
    target = theoretical_sampling_cov(spec)
    se = np.sqrt(np.diag(target) / m)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(mean) / se, np.where(mean == 0, 0.0, np.inf))
    extra = {}
    if spec.kind is Kind.SPARSE_GAUSSIAN_FISHER:
        full = with_replacement_factor(spec.n, spec.b) * _centering(spec.n)
        extra["frob_rel_cov_dev_vs_sgd_full"] = frob_rel_dist(cov, full)
        extra["frob_rel_cov_dev_vs_sgd_diag"] = frob_rel_dist(cov, np.diag(np.diag(full)))
    return MomentReport(
        kind=spec.kind.value,
        n=spec.n,
        b=spec.b,
        B=spec.B,
        draw_count=m,
        empirical_mean=mean.tolist(),
        empirical_cov=cov.tolist(),
        max_abs_mean_dev=float(np.max(np.abs(mean))),
        max_mean_z=float(np.max(z)),
        frob_rel_cov_dev=frob_rel_dist(cov, target),
        extra=extra,
    )


def fisher_cov_pair(n: int, b: int, s: RngStream, m: int) -> tuple[np.ndarray, np.ndarray]:
    """``m`` draws of ``(V_C, V_F)`` built from one shared ``eps`` each.

    ``V_F = eps / sqrt(bn)`` and ``V_C`` is its centered version, so the two
    differ only by the common mode ``mean(eps)``.
    """
    eps = s.normal((m, n)) / np.sqrt(b * n)
    return eps - eps.mean(axis=1, keepdims=True), eps


def fisher_cov_gap(n: int, b: int, s: RngStream, m: int) -> np.ndarray:
    """``|V_C - V_F| / |V_F|`` per draw."""
    vc, vf = fisher_cov_pair(n, b, s, m)
    return np.linalg.norm(vc - vf, axis=1) / np.linalg.norm(vf, axis=1)
