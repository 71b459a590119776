import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from msgd import MSGDClassifier, MSGDRegressor
from msgd.rng import derive_stream


def _blobs(seed=0, n=120):
    s = derive_stream(seed, "blobs")
    y = np.arange(n) % 2
    X = np.where(y[:, None] == 1, 1.5, -1.5) * np.array([1.0, 0.0]) + s.normal((n, 2))
    return X, np.where(y == 1, "yes", "no")


@parametrize_with_checks([MSGDClassifier(n_steps=50), MSGDRegressor(n_steps=50)])
def test_sklearn_compatible(estimator, check):
    check(estimator)


def test_classifier_learns_blobs_with_each_noise():
    X, y = _blobs()
    for noise in ("SgdWithReplacement", "GaussianCov", "GaussianFisher", "Bernoulli", None):
        clf = MSGDClassifier(noise=noise, n_steps=400, learning_rate=0.2).fit(X, y)
        assert clf.score(X, y) > 0.85
        assert set(clf.predict(X)) <= {"no", "yes"}
        proba = clf.predict_proba(X)
        assert proba.shape == (len(X), 2) and np.allclose(proba.sum(axis=1), 1)


def test_sparse_and_minibatch_variants():
    X, y = _blobs(1)
    sparse = MSGDClassifier(noise="SparseGaussianFisher", batch_size=5, outer_batch_size=20, n_steps=300).fit(X, y)
    assert sparse.score(X, y) > 0.85
    mb = MSGDClassifier(algorithm="minibatch", batch_size=5, outer_batch_size=50, n_steps=300).fit(X, y)
    assert mb.score(X, y) > 0.85
    mbc = MSGDClassifier(algorithm="minibatch", compensation="centered", batch_size=5, outer_batch_size=50, n_steps=300)
    assert mbc.fit(X, y).score(X, y) > 0.85


@pytest.mark.parametrize(
    "params",
    [
        dict(noise="TheoremSubsample"),
        dict(noise="SparseGaussianFisher"),
        dict(algorithm="minibatch"),
        dict(algorithm="other"),
        dict(learning_rate=0.0),
        dict(batch_size=5, outer_batch_size=2),
        dict(algorithm="minibatch", outer_batch_size=20, compensation="wide"),
        dict(random_state=-3),
    ],
)
def test_invalid_hyperparameters(params):
    X, y = _blobs()
    with pytest.raises(ValueError):
        MSGDClassifier(n_steps=5, **params).fit(X, y)


def test_fit_is_reproducible_and_clone_safe():
    X, y = _blobs(2)
    a = MSGDClassifier(n_steps=100, random_state=4).fit(X, y)
    b = clone(a).fit(X, y)
    assert a.coef_.tobytes() == b.coef_.tobytes()
    assert clone(a).get_params() == a.get_params()
    c = MSGDClassifier(n_steps=100, random_state=5).fit(X, y)
    assert not np.array_equal(a.coef_, c.coef_)


def test_regressor_recovers_linear_model():
    s = derive_stream(3, "reg")
    X = s.normal((300, 3)) * [1.0, 2.0, 0.5] + 4.0
    y = X @ np.array([1.0, -0.5, 2.0]) + 3.0 + 0.01 * s.normal(300)
    pipe = make_pipeline(StandardScaler(), MSGDRegressor(n_steps=3000, learning_rate=0.05, noise="GaussianFisher"))
    pipe.fit(X, y)
    assert pipe.score(X, y) > 0.999
    reg = MSGDRegressor(noise=None, n_steps=4000, learning_rate=0.1).fit(X - 4.0, y)
    assert np.allclose(reg.coef_, [1.0, -0.5, 2.0], atol=0.02)
    assert reg.intercept_ == pytest.approx(3.0 + 4.0 * (1.0 - 0.5 + 2.0), abs=0.05)


def test_divergence_is_reported():
    X, y = _blobs()
    with pytest.raises(FloatingPointError):
        MSGDRegressor(learning_rate=100.0, n_steps=200).fit(X * 100, np.arange(len(X), dtype=float))


def test_batch_larger_than_data_warns():
    X, y = _blobs(n=8)
    with pytest.warns(UserWarning, match="exceeds"):
        MSGDClassifier(batch_size=20, n_steps=5).fit(X, y)
