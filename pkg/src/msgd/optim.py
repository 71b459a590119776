"""Optimizer loops: multiplicative SGD, its mini-batch variant and additive-noise GLD."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from msgd.models import Dataset, Model, sgd_covariance
from msgd.noise import Kind, SamplingSpec, centered_compensation_std, compensation_std, draw_sampling_vectors
from msgd.rng import RngStream

TRAJECTORY_COLUMNS = ("iter", "train_loss", "test_loss", "test_acc")
_CHUNK = 256


@dataclass
class OptimizerConfig:
    """Settings shared by all loops.

    ``spec`` is the sampling noise of a multiplicative run (``None`` means no
    noise, i.e. gradient descent). For mini-batch runs ``batch_size`` is the
    outer batch and ``spec`` describes the inner noise over that batch, scaled
    by ``noise_scale``. GLD runs read the batch size ``spec.b`` to size their
    additive noise.
    """

    eta: float
    steps: int
    spec: SamplingSpec | None = None
    eval_every: int = 1
    seed_label: str = "run"
    batch_size: int | None = None
    noise_scale: float = 1.0
    divergence_factor: float = 1e6

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"step size must be positive, got {self.eta}")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    theta: np.ndarray | None = None
    theta_bar: np.ndarray | None = None
    diverged: bool = False

    def final(self, key: str) -> float:
        return self.records[-1][key]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for r in self.records:
            writer.writerow([r["iter"]] + [repr(float(r[k])) for k in TRAJECTORY_COLUMNS[1:]])
        return buf.getvalue()


class _Evaluator:
    def __init__(self, model: Model, data: Dataset, test: Dataset | None, config: OptimizerConfig):
        self.model, self.data, self.test, self.config = model, data, test, config
        self.initial = None

    def record(self, traj: Trajectory, k: int, theta) -> bool:
        """Append a record; returns False when the run must stop."""
        train = self.model.loss(theta, self.data)
        test_loss = test_acc = math.nan
        if self.test is not None:
            test_loss = self.model.loss(theta, self.test)
            if self.model.classification:
                test_acc = self.model.accuracy(theta, self.test)
        traj.records.append({"iter": k, "train_loss": train, "test_loss": test_loss, "test_acc": test_acc})
        if self.initial is None:
            self.initial = max(train, np.finfo(float).tiny)
        if not np.isfinite(train) or train > self.config.divergence_factor * self.initial:
            traj.diverged = True
            return False
        return True


def _loop(model, data, config, theta0, test, step_fn):
    theta = np.array(theta0, dtype=float)
    ev = _Evaluator(model, data, test, config)
    traj = Trajectory()
    if not ev.record(traj, 0, theta):
        traj.theta = theta
        return traj
    for k in range(config.steps):
        theta = theta - config.eta * step_fn(k, theta)
        if not np.all(np.isfinite(theta)):
            traj.diverged = True
            break
        if (k + 1) % config.eval_every == 0 and not ev.record(traj, k + 1, theta):
            break
    traj.theta = theta
    return traj


class _WeightSource:
    """Chunked draws so per-step overhead stays small."""

    def __init__(self, spec: SamplingSpec, s: RngStream):
        self.spec, self.s = spec, s
        self.buf, self.i = None, 0

    def next(self) -> np.ndarray:
        if self.buf is None or self.i == len(self.buf):
            self.buf, self.i = draw_sampling_vectors(self.spec, self.s, _CHUNK), 0
        self.i += 1
        return self.buf[self.i - 1]


def run_msgd(model: Model, data: Dataset, config: OptimizerConfig, s: RngStream, theta0=None, test=None):
    """MSGD: ``theta <- theta - eta * grad(loss_vector(theta) @ W)`` with fresh ``W`` per step."""
    spec = config.spec
    if spec is not None and spec.length != data.n:
        raise ValueError(f"sampling spec weighs {spec.length} losses but the dataset has {data.n}")
    if theta0 is None:
        theta0 = model.init_params(data.X.shape[1], s.spawn("init"))
    if spec is None:
        w_full = np.full(data.n, 1.0 / data.n)
        step = lambda k, th: model.weighted_loss_grad(th, data, w_full)
    else:
        src = _WeightSource(spec, s.spawn("noise"))
        step = lambda k, th: model.weighted_loss_grad(th, data, src.next())
    return _loop(model, data, config, theta0, test, step)


def draw_batch(n: int, B: int, s: RngStream) -> np.ndarray:
    """``B`` distinct indices out of ``n``, uniformly."""
    if B == n:
        return np.arange(n)
    return np.sort(np.argpartition(s.uniform(n), B - 1)[:B])


def minibatch_compensation(
    n: int, B: int, b: int, tune: float = 1.0, centered: bool = False
) -> tuple[SamplingSpec, float]:
    """Inner spec and scale so batch-``B`` MSGD carries the noise of batch-``b`` SGD.

    By default the inner noise is i.i.d. Gaussian on the batch (Fisher type),
    which matches the sampling-noise diagonal; the parameter-space covariance
    then agrees with SGD's up to a term in ``grad L grad L^T``. ``centered=True``
    uses centered Gaussian weights instead and matches the full covariance.
    Both inner specs have std ``1/sqrt(B)`` per entry before scaling. ``tune``
    multiplies the matched magnitude for sweeps.
    """
    if centered:
        spec = SamplingSpec(n=B, b=1, kind=Kind.GAUSSIAN_COV)
        c = centered_compensation_std(n, B, b)
    else:
        spec = SamplingSpec(n=B, b=1, kind=Kind.GAUSSIAN_FISHER)
        c = compensation_std(n, B, b)
    return spec, tune * c * np.sqrt(B)


def _inner_weights(config: OptimizerConfig, B: int, s: RngStream | None, m: int) -> np.ndarray:
    base = np.full((m, B), 1.0 / B)
    if config.spec is None:
        return base
    v = draw_sampling_vectors(config.spec, s, m) - 1.0 / B
    return base + config.noise_scale * v


def run_minibatch_msgd(
    model: Model, data: Dataset, config: OptimizerConfig, s: RngStream, theta0=None, test=None
):
    """Mini-batch MSGD: per step, a uniform batch of ``B`` and weights ``1/B + V`` over it."""
    B = config.batch_size
    if B is None or not 1 <= B <= data.n:
        raise ValueError(f"batch size must be in [1, {data.n}], got {B}")
    if config.spec is not None and config.spec.length != B:
        raise ValueError(f"inner sampling spec weighs {config.spec.length} entries, batch has {B}")
    if theta0 is None:
        theta0 = model.init_params(data.X.shape[1], s.spawn("init"))
    batch_s = s.spawn("batch")
    noise_s = s.spawn("noise")

    def step(k, th):
        idx = draw_batch(data.n, B, batch_s)
        w = _inner_weights(config, B, noise_s, 1)[0]
        return model.weighted_loss_grad(th, data.subset(idx), w)

    return _loop(model, data, config, theta0, test, step)


def minibatch_weight_samples(n: int, config: OptimizerConfig, s: RngStream, m: int) -> np.ndarray:
    """``m`` draws of the mini-batch MSGD weights embedded in all ``n`` losses."""
    B = config.batch_size
    batch_s, noise_s = s.spawn("batch"), s.spawn("noise")
    out = np.zeros((m, n))
    inner = _inner_weights(config, B, noise_s, m)
    for i in range(m):
        out[i, draw_batch(n, B, batch_s)] = inner[i]
    return out


def gld_noise_std(C: np.ndarray, mode: str) -> np.ndarray:
    """Per-coordinate std of GLD noise matched to the covariance ``C``."""
    d = C.shape[0]
    if mode == "isotropic":
        return np.full(d, np.sqrt(max(np.trace(C), 0.0) / d))
    if mode == "diag":
        return np.sqrt(np.clip(np.diag(C), 0.0, None))
    raise ValueError(f"unknown GLD mode {mode!r}")


def run_gld(
    model: Model, data: Dataset, config: OptimizerConfig, s: RngStream, mode: str = "isotropic",
    theta0=None, test=None,
):
    """Gradient descent plus additive Gaussian noise matched to the SGD covariance.

    The noise magnitude is taken from ``C(theta)`` at each evaluation point and
    held fixed until the next one.
    """
    if config.spec is None:
        raise ValueError("GLD needs config.spec to fix the batch size of the matched covariance")
    gld_noise_std(np.zeros((1, 1)), mode)
    if theta0 is None:
        theta0 = model.init_params(data.X.shape[1], s.spawn("init"))
    noise_s = s.spawn("noise")
    state = {"std": None}

    def step(k, th):
        if k % config.eval_every == 0:
            state["std"] = gld_noise_std(sgd_covariance(model, th, data, config.spec.b), mode)
        return model.grad(th, data) - state["std"] * noise_s.normal(th.size)

    return _loop(model, data, config, theta0, test, step)
