import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgd.models import (
    MLP,
    Dataset,
    LinearRegression,
    LogisticRegression,
    SizeGuardError,
    finite_difference_grad,
    fisher,
    generate_classification_data,
    generate_regression_data,
    gradient_matrix,
    loss_vector,
    sgd_covariance,
    weighted_loss_grad,
)
from msgd.noise import SamplingSpec, draw_sampling_vectors, theoretical_sampling_cov, to_noise
from msgd.rng import derive_stream
from msgd.theory import RegressionProblem


def _data(seed, n=12, p=3, classes=None):
    s = derive_stream(seed, "data")
    X = s.normal((n, p))
    if classes:
        return Dataset(X, np.arange(n) % classes)
    return Dataset(X, X @ np.linspace(1, -1, p) + 0.3 * s.normal(n))


MODELS = [
    ("linear", lambda: LinearRegression(l2=0.05), None),
    ("logistic", LogisticRegression, 2),
    ("mlp-ce", lambda: MLP(hidden=5, n_classes=3), 3),
    ("mlp-sq", lambda: MLP(hidden=4, loss="squared"), None),
]


def _setup(name, factory, classes, seed):
    model = factory()
    data = _data(seed, classes=classes)
    s = derive_stream(seed, f"theta/{name}")
    theta = s.normal(model.n_params(data.X.shape[1]))
    return model, data, theta


def test_linear_loss_vector_by_hand():
    data = Dataset(np.array([[1.0], [2.0]]), np.zeros(2))
    assert np.allclose(loss_vector(LinearRegression(), np.array([1.0]), data), [0.5, 2.0])


def test_noiseless_fit_has_zero_loss_and_covariance():
    X = _data(1).X
    theta_star = np.array([0.5, -1.0, 2.0])
    data = Dataset(X, X @ theta_star)
    model = LinearRegression()
    assert np.allclose(model.loss_vector(theta_star, data), 0)
    assert np.allclose(sgd_covariance(model, theta_star, data, 3), 0)


def test_linear_gradient_matrix_closed_form():
    model, data, theta = _setup("linear", LinearRegression, None, 2)
    G = gradient_matrix(model, theta, data)
    assert np.allclose(G, data.X.T * (data.X @ theta - data.y))


@pytest.mark.parametrize("name,factory,classes", MODELS)
@pytest.mark.parametrize("seed", range(5))
def test_weighted_grad_equals_gradient_matrix_times_w(name, factory, classes, seed):
    model, data, theta = _setup(name, factory, classes, seed)
    w = derive_stream(seed, "w").normal(data.n)
    lhs = weighted_loss_grad(model, theta, data, w)
    rhs = gradient_matrix(model, theta, data) @ w
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


@pytest.mark.parametrize("name,factory,classes", MODELS)
def test_uniform_and_indicator_weights(name, factory, classes):
    model, data, theta = _setup(name, factory, classes, 7)
    G = model.gradient_matrix(theta, data)
    assert np.allclose(model.grad(theta, data), G.mean(axis=1), atol=1e-12)
    e = np.zeros(data.n)
    e[3] = 1.0
    assert np.allclose(model.weighted_loss_grad(theta, data, e), G[:, 3], atol=1e-12)
    assert model.loss(theta, data) == pytest.approx(model.loss_vector(theta, data).mean(), abs=1e-12)


@pytest.mark.parametrize("name,factory,classes", MODELS)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_columns_pass_finite_differences(name, factory, classes, seed):
    model, data, theta = _setup(name, factory, classes, 10 + seed)
    G = model.gradient_matrix(theta, data)
    for i in (0, data.n - 1):
        one = data.subset([i])
        fd = finite_difference_grad(lambda th: model.loss_vector(th, one)[0], theta)
        assert np.linalg.norm(fd - G[:, i]) <= 1e-5 * max(1.0, np.linalg.norm(G[:, i]))


@pytest.mark.parametrize("name,factory,classes", MODELS)
def test_fisher_covariance_identity(name, factory, classes):
    model, data, theta = _setup(name, factory, classes, 3)
    for b in (1, 4):
        F = fisher(model, theta, data)
        C = sgd_covariance(model, theta, data, b)
        g = model.grad(theta, data)
        assert np.abs(F - b * C - np.outer(g, g)).max() < 1e-10 * max(1.0, np.abs(F).max())
        assert np.allclose(C, C.T, atol=1e-12)
        assert np.linalg.eigvalsh(C).min() >= -1e-10 * np.linalg.norm(C)


def test_covariance_equals_gradient_sandwich():
    model, data, theta = _setup("mlp-ce", MODELS[2][1], 3, 4)
    G = model.gradient_matrix(theta, data)
    b = 3
    sandwich = G @ theoretical_sampling_cov(SamplingSpec(data.n, b)) @ G.T
    assert np.allclose(sgd_covariance(model, theta, data, b), sandwich, atol=1e-10)


def test_covariance_matches_monte_carlo():
    model, data, theta = _setup("logistic", LogisticRegression, 2, 5)
    b, m = 2, 100_000
    G = model.gradient_matrix(theta, data)
    v = to_noise(draw_sampling_vectors(SamplingSpec(data.n, b), derive_stream(5, "mc"), m))
    samples = v @ G.T
    emp = np.cov(samples, rowvar=False)
    C = sgd_covariance(model, theta, data, b)
    # per-entry sd of a sample covariance is at most sqrt(2) C_ii C_jj / sqrt(m) for Gaussians;
    # double it for the heavier-tailed discrete noise
    tol = 4 * 2 * np.sqrt(2) * np.linalg.norm(np.sqrt(np.outer(np.diag(C), np.diag(C)))) / np.sqrt(m)
    assert np.linalg.norm(emp - C) < tol


def test_single_sample_and_stationary_point():
    model = LinearRegression()
    one = Dataset(np.array([[1.0, 2.0]]), np.array([0.3]))
    assert not sgd_covariance(model, np.array([0.1, 0.2]), one, 1).any()
    G = np.array([[1.0, -1.0]])

    class Fixed(LinearRegression):
        def gradient_matrix(self, theta, data):
            return G

    F = fisher(Fixed(), np.zeros(1), Dataset(np.zeros((2, 1)), np.zeros(2)))
    assert F[0, 0] == pytest.approx(1.0)
    C = sgd_covariance(Fixed(), np.zeros(1), Dataset(np.zeros((2, 1)), np.zeros(2)), 2)
    assert np.allclose(F, 2 * C)


def test_dimension_mismatch_and_weights_shape():
    model = LinearRegression()
    data = _data(1)
    with pytest.raises(ValueError):
        model.loss_vector(np.zeros(5), data)
    with pytest.raises(ValueError):
        model.weighted_loss_grad(np.zeros(3), data, np.ones(4))


def test_size_guard(monkeypatch):
    import msgd.models as models

    monkeypatch.setattr(models, "MAX_MATRIX_ENTRIES", 20)
    model, data, theta = _setup("linear", LinearRegression, None, 1)
    with pytest.raises(SizeGuardError):
        model.gradient_matrix(theta, data)
    model.weighted_loss_grad(theta, data, np.full(data.n, 1 / data.n))  # no guard on this path


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.ones((3, 2)), np.ones(2))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.ones(1))


def test_vectorized_gradient_matrices_match_loop():
    model, data, _ = _setup("linear", LinearRegression, None, 2)
    thetas = derive_stream(2, "stack").normal((4, 3))
    fast = model.gradient_matrices(thetas, data)
    slow = np.stack([model.gradient_matrix(t, data) for t in thetas])
    assert np.allclose(fast, slow, atol=1e-14)


def test_regression_data_recovers_truth_without_noise():
    problem = RegressionProblem(np.diag([1.0, 2.0, 0.5]), np.array([1.0, -2.0, 0.5]), 0.0)
    data = generate_regression_data(problem, 10_000, derive_stream(1, "reg"))
    fit = np.linalg.lstsq(data.X, data.y, rcond=None)[0]
    assert np.allclose(fit, problem.theta_star, atol=1e-6)


def test_regression_data_moments():
    n = 100_000
    problem = RegressionProblem(np.eye(3), np.array([1.0, 0.0, -1.0]), 0.04)
    data = generate_regression_data(problem, n, derive_stream(2, "reg"))
    cov = data.X.T @ data.X / n
    assert np.linalg.norm(cov - np.eye(3)) / np.sqrt(3) < 0.05
    resid = data.y - data.X @ problem.theta_star
    assert abs(resid.var() - 0.04) < 4 * 0.04 * np.sqrt(2 / n)
    assert data.meta["R2"] == pytest.approx(5.0)


def test_regression_data_rejects_non_pd():
    class Bad:
        Sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
        theta_star = np.zeros(2)
        sigma2 = 0.1

    with pytest.raises(ValueError):
        generate_regression_data(Bad(), 10, derive_stream(1, "bad"))


def test_blobs_balanced_and_separable():
    train, test = generate_classification_data([[5.0, 0.0], [-5.0, 0.0]], 1.0, 400, derive_stream(1, "blobs"))
    assert np.bincount(train.y.astype(int)).tolist() == [200, 200]
    # the Bayes rule for symmetric blobs is the sign of the first coordinate
    acc = np.mean((test.X[:, 0] < 0) == test.y)
    assert acc >= 0.99


def test_blobs_uninformative_when_spread_huge():
    _, test = generate_classification_data([[1.0, 0.0], [-1.0, 0.0]], 1e6, 10_000, derive_stream(2, "blobs"))
    acc = np.mean((test.X[:, 0] < 0) == test.y)
    assert abs(acc - 0.5) < 4 * 0.5 / np.sqrt(10_000)


def test_blobs_are_deterministic():
    a = generate_classification_data([[1, 1], [0, 0]], 0.5, 30, derive_stream(3, "b"))[0]
    b = generate_classification_data([[1, 1], [0, 0]], 0.5, 30, derive_stream(3, "b"))[0]
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    with pytest.raises(ValueError):
        generate_classification_data([[1, 1]], 0.5, 30, derive_stream(3, "b"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(2, 15))
def test_commutation_identity_property(seed, hidden, n):
    model = MLP(hidden=hidden)
    s = derive_stream(seed, "prop")
    data = Dataset(s.normal((n, 2)), np.arange(n) % 2)
    theta = s.normal(model.n_params(2))
    w = s.normal(n)
    rhs = model.gradient_matrix(theta, data) @ w
    assert np.allclose(model.weighted_loss_grad(theta, data, w), rhs, rtol=1e-10, atol=1e-12)
