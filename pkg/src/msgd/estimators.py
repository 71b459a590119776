"""scikit-learn estimators trained with multiplicative SGD."""

from __future__ import annotations

import secrets
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from msgd.models import MLP, Dataset, LinearRegression
from msgd.noise import BATCH_KINDS, Kind, SamplingSpec
from msgd.optim import OptimizerConfig, minibatch_compensation, run_minibatch_msgd, run_msgd
from msgd.rng import derive_stream


class _MSGDBase(BaseEstimator):
    """Shared fitting logic.

    ``algorithm="msgd"`` draws a sampling vector over all training losses each
    step. ``algorithm="minibatch"`` draws a batch of ``outer_batch_size`` and adds
    Gaussian weights on it whose scale matches the noise of SGD at ``batch_size``
    (times ``noise_scale``). ``noise=None`` gives plain gradient descent.
    """

    def _config(self, n: int) -> tuple[OptimizerConfig, str]:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.n_steps) < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.algorithm not in ("msgd", "minibatch"):
            raise ValueError(f"algorithm must be 'msgd' or 'minibatch', got {self.algorithm!r}")
        b = int(self.batch_size)
        if b < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if b > n:
            warnings.warn(f"batch_size={b} exceeds the {n} training samples; using {n}", UserWarning)
            b = n
        B = self.outer_batch_size
        if B is not None:
            if int(B) < b:
                raise ValueError(f"outer_batch_size must be >= batch_size, got {B} < {b}")
            B = min(int(B), n)

        eval_every = max(1, int(self.eval_every))
        common = dict(eta=float(self.learning_rate), steps=int(self.n_steps), eval_every=eval_every)
        if self.algorithm == "minibatch":
            if B is None:
                raise ValueError("algorithm='minibatch' needs outer_batch_size")
            if self.compensation not in ("fisher", "centered"):
                raise ValueError(f"compensation must be 'fisher' or 'centered', got {self.compensation!r}")
            centered = self.compensation == "centered"
            spec, scale = minibatch_compensation(n, B, b, tune=float(self.noise_scale), centered=centered)
            if self.noise is None:
                spec = None
            return OptimizerConfig(spec=spec, batch_size=B, noise_scale=scale, **common), "minibatch"

        if self.noise is None:
            return OptimizerConfig(**common), "msgd"
        kind = Kind(self.noise)
        if kind in BATCH_KINDS:
            raise ValueError(f"{kind.value} weighs a fresh batch, not the training set; use another kind")
        if kind is Kind.SPARSE_GAUSSIAN_FISHER and B is None:
            raise ValueError("SparseGaussianFisher needs outer_batch_size")
        spec = SamplingSpec(n=n, b=b, kind=kind, B=B)
        return OptimizerConfig(spec=spec, **common), "msgd"

    def _seed(self) -> int:
        if self.random_state is None:
            return secrets.randbits(63)
        if isinstance(self.random_state, (int, np.integer)) and 0 <= self.random_state < 2**64:
            return int(self.random_state)
        raise ValueError(f"random_state must be None or a non-negative int, got {self.random_state!r}")

    def _run(self, model, data: Dataset):
        config, algo = self._config(data.n)
        s = derive_stream(self._seed(), "fit")
        runner = run_minibatch_msgd if algo == "minibatch" else run_msgd
        traj = runner(model, data, config, s)
        if traj.diverged or not np.all(np.isfinite(traj.theta)):
            raise FloatingPointError(
                f"training diverged at learning_rate={self.learning_rate}; lower it or rescale the inputs"
            )
        self.loss_curve_ = [r["train_loss"] for r in traj.records]
        self.n_iter_ = int(traj.records[-1]["iter"])
        if self.loss_curve_[-1] > self.loss_curve_[0]:
            warnings.warn("final training loss exceeds the initial loss", ConvergenceWarning)
        return traj.theta


class MSGDClassifier(ClassifierMixin, _MSGDBase):
    """One-hidden-layer tanh network with softmax output.

    Parameters
    ----------
    hidden_units : int
    noise : str or None
        Sampling-noise kind, e.g. ``"SgdWithReplacement"``, ``"GaussianFisher"``,
        ``"GaussianCov"``, ``"Bernoulli"``, ``"SparseGaussianFisher"``.
    batch_size : int
        The ``b`` of the sampling noise.
    outer_batch_size : int or None
        ``B`` for ``SparseGaussianFisher`` and for ``algorithm="minibatch"``.
    algorithm : {"msgd", "minibatch"}
    noise_scale : float
        Multiplies the compensating noise of the mini-batch variant.
    compensation : {"fisher", "centered"}
        I.i.d. Gaussian batch weights, or centered ones that also match the
        off-diagonal SGD covariance.
    learning_rate, n_steps, eval_every, random_state
    """

    def __init__(
        self,
        hidden_units=16,
        noise="SgdWithReplacement",
        batch_size=10,
        outer_batch_size=None,
        algorithm="msgd",
        noise_scale=1.0,
        compensation="fisher",
        learning_rate=0.1,
        n_steps=500,
        eval_every=10,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.noise = noise
        self.batch_size = batch_size
        self.outer_batch_size = outer_batch_size
        self.algorithm = algorithm
        self.noise_scale = noise_scale
        self.compensation = compensation
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes; got 1 class")
        if int(self.hidden_units) < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        self.model_ = MLP(hidden=int(self.hidden_units), n_classes=len(self.classes_))
        self.coef_ = self._run(self.model_, Dataset(X, self._encoder.transform(y)))
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, reset=False)
        return self.model_.predict_proba(self.coef_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class MSGDRegressor(RegressorMixin, _MSGDBase):
    """Ridge-regularized linear least squares, ``0.5 (x.w + c - y)**2 + 0.5 alpha |w|**2``.

    The intercept is not penalized. Parameters match :class:`MSGDClassifier`
    where they overlap.
    """

    def __init__(
        self,
        alpha=0.0,
        fit_intercept=True,
        noise="SgdWithReplacement",
        batch_size=10,
        outer_batch_size=None,
        algorithm="msgd",
        noise_scale=1.0,
        compensation="fisher",
        learning_rate=0.01,
        n_steps=500,
        eval_every=10,
        random_state=0,
    ):
        self.alpha = alpha
        self.fit_intercept = fit_intercept
        self.noise = noise
        self.batch_size = batch_size
        self.outer_batch_size = outer_batch_size
        self.algorithm = algorithm
        self.noise_scale = noise_scale
        self.compensation = compensation
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=True)
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        y = np.asarray(y, dtype=float)
        # centering stands in for an unpenalized intercept
        x_mean = X.mean(axis=0) if self.fit_intercept else np.zeros(X.shape[1])
        y_mean = y.mean() if self.fit_intercept else 0.0
        model = LinearRegression(l2=float(self.alpha))
        w = self._run(model, Dataset(X - x_mean, y - y_mean))
        self.coef_ = w
        self.intercept_ = float(y_mean - x_mean @ w)
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, reset=False)
        return X @ self.coef_ + self.intercept_
