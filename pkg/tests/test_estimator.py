import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from dphe.estimator import SecureFederatedSVC
from dphe.fedlearn import make_blobs

# six features with three informative: a 0.9 target would leave no non-zero weight
FAST = dict(n_users=3, rounds=2, local_steps=50, init_steps=200, key_bits=256, target_sparsity=0.5)


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(300, 6, np.random.default_rng(0))


def test_params_roundtrip():
    est = SecureFederatedSVC(**FAST)
    assert est.get_params()["key_bits"] == 256
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(rounds=4)
    assert est.rounds == 4


def test_fit_predict(blobs):
    X, y = blobs
    est = SecureFederatedSVC(**FAST).fit(X, y)
    assert est.coef_.shape == (1, 6) and est.n_features_in_ == 6
    assert list(est.classes_) == [-1, 1]
    assert est.score(X, y) > 0.95
    assert len(est.history_) == FAST["rounds"] + 1
    assert est.decision_function(X).shape == (300,)


def test_secure_and_plaintext_modes_agree(blobs):
    X, y = blobs
    a = SecureFederatedSVC(**FAST, mode="secure").fit(X, y)
    b = SecureFederatedSVC(**FAST, mode="plaintext").fit(X, y)
    assert np.max(np.abs(a.coef_ - b.coef_)) < 1e-6


def test_explicit_groups(blobs):
    X, y = blobs
    groups = np.arange(len(X)) % 4 - 1  # -1 marks the init split
    est = SecureFederatedSVC(**FAST, mode="plaintext").fit(X, y, groups=groups)
    assert est.score(X, y) > 0.9
    with pytest.raises(ValueError):
        SecureFederatedSVC(**FAST).fit(X, y, groups=np.zeros(len(X)))


def test_unfitted_and_shape_errors(blobs):
    X, y = blobs
    with pytest.raises(NotFittedError):
        SecureFederatedSVC().predict(X)
    est = SecureFederatedSVC(**FAST, mode="plaintext").fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])
    with pytest.raises(ValueError):
        SecureFederatedSVC(**FAST).fit(X, np.ones(len(X)))


def test_sklearn_tooling(blobs):
    X, y = blobs
    pipe = make_pipeline(StandardScaler(), SecureFederatedSVC(**FAST, mode="plaintext"))
    scores = cross_val_score(pipe, X, y, cv=3)
    # compatibility check; 66 init rows per fold give a strongly regularized model
    assert scores.min() > 0.75
