"""Objectives with per-sample losses, explicit gradient matrices and weighted-loss gradients.

For parameters ``theta`` (length ``d``) and ``n`` samples every model exposes

* ``loss_vector(theta, data)``: the ``n`` per-sample losses,
* ``gradient_matrix(theta, data)``: the ``d x n`` matrix of per-sample gradients,
* ``weighted_loss_grad(theta, data, w)``: the gradient of ``loss_vector @ w``,
  obtained by backpropagating the weighted scalar loss. The gradient matrix is
  never formed on this path, which is what makes multiplicative noise cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from msgd.rng import RngStream

MAX_MATRIX_ENTRIES = 10**7


class SizeGuardError(ValueError):
    """Raised when an explicit ``d x n`` matrix would be too large to build."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y)
        if self.X.shape[0] < 1 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"inputs {self.X.shape} and targets {self.y.shape} disagree")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite inputs")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx])


class Model:
    """Base class; subclasses implement the per-sample forward/backward pieces."""

    classification = False

    def n_params(self, n_features: int) -> int:
        raise NotImplementedError

    def init_params(self, n_features: int, s: RngStream | None = None) -> np.ndarray:
        return np.zeros(self.n_params(n_features))

    def _check(self, theta, data: Dataset) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params(data.X.shape[1]),):
            raise ValueError(
                f"parameter vector has shape {theta.shape}, model expects "
                f"({self.n_params(data.X.shape[1])},) for {data.X.shape[1]} features"
            )
        return theta

    def loss_vector(self, theta, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def weighted_loss_grad(self, theta, data: Dataset, w) -> np.ndarray:
        raise NotImplementedError

    def gradient_matrix(self, theta, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def gradient_matrices(self, thetas, data: Dataset) -> np.ndarray:
        """Gradient matrices for a stack of parameter vectors, shape ``(k, d, n)``."""
        return np.stack([self.gradient_matrix(th, data) for th in np.atleast_2d(thetas)])

    def loss(self, theta, data: Dataset) -> float:
        return float(np.mean(self.loss_vector(theta, data)))

    def grad(self, theta, data: Dataset) -> np.ndarray:
        return self.weighted_loss_grad(theta, data, np.full(data.n, 1.0 / data.n))

    def predict(self, theta, X) -> np.ndarray:
        raise NotImplementedError

    def accuracy(self, theta, data: Dataset) -> float:
        return float(np.mean(self.predict(theta, data.X) == data.y))

    def _guard(self, theta, data: Dataset):
        if theta.size * data.n > MAX_MATRIX_ENTRIES:
            raise SizeGuardError(
                f"gradient matrix would have {theta.size} x {data.n} entries; "
                "use weighted_loss_grad instead"
            )

    def _weights(self, w, data: Dataset) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (data.n,):
            raise ValueError(f"weights have shape {w.shape}, expected ({data.n},)")
        return w


class LinearRegression(Model):
    """``0.5 (x.theta - y)**2 + 0.5 * l2 * |theta|**2`` per sample, no intercept."""

    def __init__(self, l2: float = 0.0):
        self.l2 = l2

    def n_params(self, n_features):
        return n_features

    def _residual(self, theta, data):
        return data.X @ theta - data.y

    def loss_vector(self, theta, data):
        theta = self._check(theta, data)
        return 0.5 * self._residual(theta, data) ** 2 + 0.5 * self.l2 * theta @ theta

    def weighted_loss_grad(self, theta, data, w):
        theta = self._check(theta, data)
        w = self._weights(w, data)
        return data.X.T @ (w * self._residual(theta, data)) + self.l2 * w.sum() * theta

    def gradient_matrix(self, theta, data):
        theta = self._check(theta, data)
        self._guard(theta, data)
        return data.X.T * self._residual(theta, data) + self.l2 * theta[:, None]

    def gradient_matrices(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        resid = thetas @ data.X.T - data.y
        return data.X.T[None, :, :] * resid[:, None, :] + self.l2 * thetas[:, :, None]

    def predict(self, theta, X):
        return np.asarray(X, dtype=float) @ theta


class LogisticRegression(Model):
    """Binary cross-entropy on the logit ``x.theta``; labels in {0, 1}, no intercept."""

    classification = True

    def n_params(self, n_features):
        return n_features

    def loss_vector(self, theta, data):
        theta = self._check(theta, data)
        z = data.X @ theta
        return np.logaddexp(0.0, z) - data.y * z

    def weighted_loss_grad(self, theta, data, w):
        theta = self._check(theta, data)
        w = self._weights(w, data)
        return data.X.T @ (w * (expit(data.X @ theta) - data.y))

    def gradient_matrix(self, theta, data):
        theta = self._check(theta, data)
        self._guard(theta, data)
        return data.X.T * (expit(data.X @ theta) - data.y)

    def predict(self, theta, X):
        return (np.asarray(X, dtype=float) @ theta > 0).astype(int)


class MLP(Model):
    """One tanh hidden layer.

    ``loss="squared"`` regresses a scalar target with ``0.5 (out - y)**2``;
    ``loss="cross_entropy"`` classifies integer labels ``0..n_classes-1`` with
    softmax cross-entropy. Parameters are packed as ``W1, b1, W2, b2``.
    """

    def __init__(self, hidden: int = 16, loss: str = "cross_entropy", n_classes: int = 2):
        if loss not in ("squared", "cross_entropy"):
            raise ValueError(f"unknown loss {loss!r}")
        self.hidden = hidden
        self.loss_name = loss
        self.n_classes = n_classes
        self.classification = loss == "cross_entropy"

    @property
    def n_out(self) -> int:
        return self.n_classes if self.classification else 1

    def n_params(self, n_features):
        h, k = self.hidden, self.n_out
        return h * n_features + h + k * h + k

    def init_params(self, n_features, s=None):
        h, k = self.hidden, self.n_out
        if s is None:
            raise ValueError("MLP initialization needs a random stream")
        W1 = s.normal((h, n_features)) / np.sqrt(n_features)
        W2 = s.normal((k, h)) / np.sqrt(h)
        return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(k)])

    def _unpack(self, theta, p):
        h, k = self.hidden, self.n_out
        i = 0
        W1 = theta[i : i + h * p].reshape(h, p)
        i += h * p
        b1 = theta[i : i + h]
        i += h
        W2 = theta[i : i + k * h].reshape(k, h)
        i += k * h
        return W1, b1, W2, theta[i : i + k]

    def _forward(self, theta, X):
        W1, b1, W2, b2 = self._unpack(theta, X.shape[1])
        z = np.tanh(X @ W1.T + b1)
        return z, z @ W2.T + b2, W2

    def _out_loss(self, out, y):
        if self.classification:
            return -np.take_along_axis(log_softmax(out, axis=1), y.astype(int)[:, None], axis=1)[:, 0]
        return 0.5 * (out[:, 0] - y) ** 2

    def _out_delta(self, out, y):
        if self.classification:
            d = softmax(out, axis=1)
            d[np.arange(len(y)), y.astype(int)] -= 1.0
            return d
        return (out[:, 0] - y)[:, None]

    def loss_vector(self, theta, data):
        theta = self._check(theta, data)
        _, out, _ = self._forward(theta, data.X)
        return self._out_loss(out, data.y)

    def weighted_loss_grad(self, theta, data, w):
        theta = self._check(theta, data)
        w = self._weights(w, data)
        z, out, W2 = self._forward(theta, data.X)
        d_out = self._out_delta(out, data.y) * w[:, None]
        d_hid = (d_out @ W2) * (1.0 - z**2)
        return np.concatenate(
            [(d_hid.T @ data.X).ravel(), d_hid.sum(axis=0), (d_out.T @ z).ravel(), d_out.sum(axis=0)]
        )

    def gradient_matrix(self, theta, data):
        theta = self._check(theta, data)
        self._guard(theta, data)
        z, out, W2 = self._forward(theta, data.X)
        d_out = self._out_delta(out, data.y)
        d_hid = (d_out @ W2) * (1.0 - z**2)
        n = data.n
        cols = [
            np.einsum("ih,ip->hpi", d_hid, data.X).reshape(-1, n),
            d_hid.T,
            np.einsum("ik,ih->khi", d_out, z).reshape(-1, n),
            d_out.T,
        ]
        return np.concatenate(cols, axis=0)

    def predict(self, theta, X):
        _, out, _ = self._forward(np.asarray(theta, dtype=float), np.asarray(X, dtype=float))
        if self.classification:
            return np.argmax(out, axis=1)
        return out[:, 0]

    def predict_proba(self, theta, X):
        _, out, _ = self._forward(np.asarray(theta, dtype=float), np.asarray(X, dtype=float))
        return softmax(out, axis=1)


def loss_vector(model: Model, theta, data: Dataset) -> np.ndarray:
    return model.loss_vector(theta, data)


def weighted_loss_grad(model: Model, theta, data: Dataset, w) -> np.ndarray:
    return model.weighted_loss_grad(theta, data, w)


def gradient_matrix(model: Model, theta, data: Dataset) -> np.ndarray:
    return model.gradient_matrix(theta, data)


def fisher(model: Model, theta, data: Dataset) -> np.ndarray:
    """Second raw moment of per-sample gradients, ``G G^T / n``."""
    G = model.gradient_matrix(theta, data)
    F = G @ G.T / data.n
    return 0.5 * (F + F.T)


def sgd_covariance(model: Model, theta, data: Dataset, b: int) -> np.ndarray:
    """Covariance of the batch-``b`` with-replacement SGD gradient noise."""
    G = model.gradient_matrix(theta, data)
    g = G.mean(axis=1)
    C = (G @ G.T / data.n - np.outer(g, g)) / b
    return 0.5 * (C + C.T)


def finite_difference_grad(f, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for j in range(theta.size):
        h = rel_step * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        out[j] = (f(tp) - f(tm)) / (2 * h)
    return out


def generate_regression_data(problem, n: int, s: RngStream) -> Dataset:
    """Well-specified Gaussian design: ``x ~ N(0, Sigma)``, ``y = x.theta* + N(0, sigma2)``."""
    Sigma = np.asarray(problem.Sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise ValueError("Sigma must be positive definite") from None
    p = Sigma.shape[0]
    X = s.normal((n, p)) @ chol.T
    y = X @ np.asarray(problem.theta_star, dtype=float) + np.sqrt(problem.sigma2) * s.normal(n)
    eig = np.linalg.eigvalsh(Sigma)
    meta = {
        "R2": float(np.trace(Sigma) + 2 * eig[-1]),
        "lambda": float(eig[-1]),
        "sigma2": float(problem.sigma2),
    }
    return Dataset(X, y, meta)


def generate_classification_data(
    centers, spread: float, n: int, s: RngStream, n_test: int | None = None
) -> tuple[Dataset, Dataset]:
    """Balanced Gaussian blobs around ``centers``; returns ``(train, test)``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(centers) < 2:
        raise ValueError("need at least two centers")
    n_test = n if n_test is None else n_test

    def blobs(m, stream):
        labels = np.arange(m) % len(centers)
        X = centers[labels] + spread * stream.normal((m, centers.shape[1]))
        order = np.argsort(stream.uniform(m), kind="stable")
        return Dataset(X[order], labels[order])

    return blobs(n, s.spawn("train")), blobs(n_test, s.spawn("test"))
