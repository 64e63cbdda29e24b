"""scikit-learn estimator wrapping the federated trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fedlearn import SECURE, TrainConfig, federated_train


class SecureFederatedSVC(ClassifierMixin, BaseEstimator):
    """Sparse linear SVM trained by ``n_users`` parties with secure averaging.

    Parameters
    ----------
    n_users : int
        Number of simulated users (at least 3 in secure mode).
    rounds : int
        Number of broadcast/update/average rounds.
    local_steps : int
        SGD steps each user runs per round.
    init_fraction : float
        Share of the training rows held back as the aggregator's
        initialization split when ``groups`` is not given to :meth:`fit`.
    lam, l1_ratio : float
        Elastic-net strength and L1 share.
    target_sparsity : float
        Fraction of exact zeros the regularization controller aims for.
        With few features a high target can force every weight to zero;
        keep ``(1 - target_sparsity) * n_features`` at or above the number
        of useful features.
    mode : {"secure", "plaintext"}
        How local models are averaged.
    key_bits : int
        Paillier modulus size for secure mode.
    random_state : int
        Seed for the data split, SGD sampling and protocol randomness.
    """

    def __init__(self, n_users=5, rounds=10, local_steps=200, init_steps=1000, init_fraction=0.1,
                 gamma0=0.1, t0=100.0, lam=0.01, l1_ratio=0.5, target_sparsity=0.9, adapt=True,
                 capacity_ratio=0.1, mode=SECURE, key_bits=1024, frac_bits=32, standardize=False,
                 random_state=0):
        self.n_users = n_users
        self.rounds = rounds
        self.local_steps = local_steps
        self.init_steps = init_steps
        self.init_fraction = init_fraction
        self.gamma0 = gamma0
        self.t0 = t0
        self.lam = lam
        self.l1_ratio = l1_ratio
        self.target_sparsity = target_sparsity
        self.adapt = adapt
        self.capacity_ratio = capacity_ratio
        self.mode = mode
        self.key_bits = key_bits
        self.frac_bits = frac_bits
        self.standardize = standardize
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(rounds=self.rounds, local_steps=self.local_steps, init_steps=self.init_steps,
                           gamma0=self.gamma0, t0=self.t0, lam=self.lam, l1_ratio=self.l1_ratio,
                           target_sparsity=self.target_sparsity, adapt=self.adapt,
                           n_users=self.n_users, seed=self.random_state,
                           capacity_ratio=self.capacity_ratio, key_bits=self.key_bits,
                           frac_bits=self.frac_bits, standardize=self.standardize)

    def _split(self, n_samples, groups):
        if groups is not None:
            groups = np.asarray(groups)
            if groups.shape != (n_samples,):
                raise ValueError("groups must have one entry per sample")
            init_idx = np.flatnonzero(groups < 0)
            user_idx = [np.flatnonzero(groups == n) for n in range(self.n_users)]
        else:
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(n_samples)
            n_init = max(1, int(round(self.init_fraction * n_samples)))
            init_idx = perm[:n_init]
            user_idx = np.array_split(perm[n_init:], self.n_users)
        if len(init_idx) == 0 or any(len(u) == 0 for u in user_idx):
            raise ValueError("every user and the initialization split need at least one sample")
        return init_idx, user_idx

    def fit(self, X, y, groups=None):
        """Fit on ``(X, y)``.

        ``groups`` optionally assigns rows to users ``0..n_users-1``;
        negative entries mark the initialization split.
        """
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        init_idx, user_idx = self._split(X.shape[0], groups)
        result = federated_train([(X[i], y[i]) for i in user_idx], (X[init_idx], y[init_idx]),
                                 self._train_config(), mode=self.mode, eval_data=(X, y))
        self.model_ = result.final
        self.coef_ = self.model_.coef.copy()
        self.history_ = result.metrics
        self.lambda_ = result.metrics[-1].lam
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.decision_function(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.predict(X)
