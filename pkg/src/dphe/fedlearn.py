"""Federated training of sparse one-vs-rest linear SVMs.

Each round the aggregator broadcasts the current average, every user runs
hinge-loss SGD with an elastic-net penalty on its private data, and the
local models are averaged either through :func:`run_secure_average` or in
the clear. The L1 part of the penalty is applied as a proximal
soft-threshold so that local weights contain exact zeros.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .protocol import ProtocolConfig, run_secure_average
from .sparse import sparsity

SECURE = "secure"
PLAINTEXT = "plaintext"


@dataclass
class TrainConfig:
    rounds: int = 10
    local_steps: int = 200
    init_steps: int = 1000
    gamma0: float = 0.1
    t0: float = 100.0
    lam: float = 0.01
    l1_ratio: float = 0.5
    target_sparsity: float = 0.9
    adapt: bool = True
    adapt_rate: float = 0.2
    adapt_band: float = 0.05
    calibrate: bool = True
    calibrate_iters: int = 40
    calibrate_trials: int = 8
    n_users: int = 5
    seed: int = 0
    capacity_ratio: float = 0.1
    key_bits: int = 1024
    frac_bits: int = 32
    max_magnitude: float = 1e3
    standardize: bool = False

    def __post_init__(self):
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")
        if not 0.0 < self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in (0, 1)")
        if self.rounds < 0 or self.local_steps < 0 or self.init_steps < 0:
            raise ValueError("rounds and step counts must be non-negative")

    def learning_rate(self, t: int) -> float:
        return self.gamma0 / (1.0 + t / self.t0)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LinearModel:
    """One-vs-rest weights, flattened class-major (``NC`` blocks of ``D``).

    Binary tasks use a single block whose positive side is ``classes[1]``.
    """

    weights: np.ndarray
    D: int
    classes: np.ndarray
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.D * self.NC:
            raise ValueError(f"expected {self.D * self.NC} weights, got {self.weights.size}")

    @property
    def NC(self) -> int:
        return 1 if len(self.classes) == 2 else len(self.classes)

    @property
    def coef(self) -> np.ndarray:
        return self.weights.reshape(self.NC, self.D)

    def with_weights(self, weights) -> "LinearModel":
        return dataclasses.replace(self, weights=np.array(weights, dtype=float))

    def prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.mean is not None:
            X = (X - self.mean) / self.scale
        return X

    def decision_function(self, X) -> np.ndarray:
        scores = self.prepare(X) @ self.coef.T
        return scores[:, 0] if self.NC == 1 else scores

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if self.NC == 1:
            return self.classes[(scores > 0).astype(int)]
        # ties resolve to the lowest class index
        return self.classes[np.argmax(scores, axis=1)]


def _targets(y, classes) -> np.ndarray:
    """``(n, NC)`` matrix of +1/-1 one-vs-rest targets."""
    y = np.asarray(y)
    if len(classes) == 2:
        return np.where(y == classes[1], 1.0, -1.0)[:, None]
    return np.where(y[:, None] == np.asarray(classes)[None, :], 1.0, -1.0)


def soft_threshold(w: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(w) * np.maximum(np.abs(w) - tau, 0.0)


def sgd_step(W: np.ndarray, x: np.ndarray, targets: np.ndarray, gamma: float, lam: float,
             l1_ratio: float) -> np.ndarray:
    """One proximal hinge-SGD step on every one-vs-rest block of ``W``."""
    margins = targets * (W @ x)
    active = margins < 1.0
    grad = np.where(active[:, None], -targets[:, None] * x[None, :], 0.0)
    if lam:
        grad = grad + lam * (1.0 - l1_ratio) * W
    W = W - gamma * grad
    if lam and l1_ratio:
        W = soft_threshold(W, gamma * lam * l1_ratio)
    return W


def _sgd(model: LinearModel, X, y, config: TrainConfig, rng: np.random.Generator,
         steps: int, t_start: int, lam: float) -> LinearModel:
    X = model.prepare(X)
    T = _targets(y, model.classes)
    W = model.coef.copy()
    for step in range(steps):
        i = int(rng.integers(X.shape[0]))
        W = sgd_step(W, X[i], T[i], config.learning_rate(t_start + step), lam, config.l1_ratio)
    return model.with_weights(W.ravel())


def init_model(X, y, config: TrainConfig, classes=None, rng=None) -> LinearModel:
    """Aggregator-side plaintext training on the initialization split."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("initialization dataset is empty")
    classes = np.unique(y) if classes is None else np.asarray(classes)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    mean = scale = None
    if config.standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    D = X.shape[1]
    NC = 1 if len(classes) == 2 else len(classes)
    model = LinearModel(np.zeros(D * NC), D, classes, mean, scale)
    rng = rng if rng is not None else np.random.default_rng([config.seed, 0xA6])
    return _sgd(model, X, y, config, rng, config.init_steps, 0, config.lam)


def local_update(model: LinearModel, X, y, config: TrainConfig, rng: np.random.Generator,
                 t_start: int = 0, lam: float | None = None) -> LinearModel:
    """Run ``config.local_steps`` proximal SGD steps starting from the broadcast model."""
    if len(X) == 0:
        raise ValueError("user dataset is empty")
    lam = config.lam if lam is None else lam
    return _sgd(model, X, y, config, rng, config.local_steps, t_start, lam)


def adapt_regularization(measured: float, target: float, lam: float, rate: float = 0.2,
                         band: float = 0.05) -> float:
    """Multiplicative controller steering mean sparsity into ``[target, target + band]``."""
    if measured < target:
        return lam * (1.0 + rate)
    if measured > target + band:
        return lam * (1.0 - rate)
    return lam


def calibrate_regularization(model: LinearModel, X, y, config: TrainConfig) -> float:
    """Pick a starting strength by running the controller on the initialization split.

    Simulates a local update from ``model`` on the aggregator's own data and
    adapts until the simulated sparsity lands in the controller's band.
    """
    lam = config.lam
    for k in range(config.calibrate_iters):
        s = np.mean([sparsity(local_update(model, X, y, config, np.random.default_rng([config.seed, 0xCA, k, j]),
                                           lam=lam).weights)
                     for j in range(config.calibrate_trials)])
        new = adapt_regularization(s, config.target_sparsity, lam, config.adapt_rate, config.adapt_band)
        if new == lam:
            break
        lam = new
    return lam


def capacity_for(D: int, NC: int, ratio: float = 0.1) -> int:
    return max(1, math.ceil(ratio * D * NC))


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    sparsity: float
    lam: float
    wallclock_encrypt_ms: float = 0.0

    def row(self, timing: bool = False) -> dict:
        out = {"round": self.round, "accuracy": f"{self.accuracy:.6f}",
               "sparsity": f"{self.sparsity:.6f}", "lambda": repr(self.lam)}
        if timing:
            out["wallclock_encrypt_ms"] = f"{self.wallclock_encrypt_ms:.3f}"
        return out


@dataclass
class TrainResult:
    models: list[LinearModel]
    metrics: list[RoundMetrics]
    local_models: list[list[LinearModel]] = field(default_factory=list)

    @property
    def final(self) -> LinearModel:
        return self.models[-1]


def federated_train(user_data, init_data, config: TrainConfig, mode: str = SECURE,
                    eval_data=None) -> TrainResult:
    """Train for ``config.rounds`` rounds; ``models[t]`` is the average after round ``t``.

    ``user_data`` is a list of ``(X, y)`` pairs, one per user. Round 0 holds
    the initial model built from ``init_data``.
    """
    if mode not in (SECURE, PLAINTEXT):
        raise ValueError(f"mode must be {SECURE!r} or {PLAINTEXT!r}")
    N = len(user_data)
    if N == 0:
        raise ValueError("no user datasets")
    X0, y0 = init_data
    classes = np.unique(np.concatenate([np.asarray(y0)] + [np.asarray(y) for _, y in user_data]))
    model = init_model(X0, y0, config, classes=classes)
    if eval_data is None:
        eval_data = (np.vstack([X0] + [X for X, _ in user_data]),
                     np.concatenate([y0] + [y for _, y in user_data]))

    lam = calibrate_regularization(model, X0, y0, config) if config.calibrate else config.lam
    models = [model]
    metrics = [RoundMetrics(0, evaluate(model, *eval_data)["accuracy"], sparsity(model.weights), lam)]
    local_history = []
    D_total = model.weights.size
    M = capacity_for(model.D, model.NC, config.capacity_ratio)

    for t in range(config.rounds):
        locals_ = []
        for n, (X, y) in enumerate(user_data):
            rng = np.random.default_rng([config.seed, t, n])
            locals_.append(local_update(model, X, y, config, rng, t_start=t * config.local_steps, lam=lam))
        stacked = np.stack([m.weights for m in locals_])
        measured = float(np.mean([sparsity(w) for w in stacked]))

        encrypt_ms = 0.0
        if mode == SECURE:
            pcfg = ProtocolConfig(D=D_total, N=N, M=M, key_bits=config.key_bits,
                                  frac_bits=config.frac_bits, max_magnitude=config.max_magnitude)
            avg, transcript = run_secure_average(pcfg, stacked, random.Random(_round_seed(config.seed, t)))
            encrypt_ms = transcript.timings.get("encrypt", 0.0)
        else:
            avg = stacked.mean(axis=0)

        model = model.with_weights(avg)
        models.append(model)
        local_history.append(locals_)
        metrics.append(RoundMetrics(t + 1, evaluate(model, *eval_data)["accuracy"], measured, lam,
                                    encrypt_ms))
        if config.adapt:
            lam = adapt_regularization(measured, config.target_sparsity, lam,
                                       config.adapt_rate, config.adapt_band)
    return TrainResult(models, metrics, local_history)


def _round_seed(seed: int, t: int) -> int:
    return (seed * 1_000_003 + t) & 0xFFFFFFFFFFFFFFFF


def centralized_train(X, y, config: TrainConfig, steps: int | None = None) -> LinearModel:
    """Plaintext reference: one model trained on all data with the same update rule."""
    steps = config.init_steps if steps is None else steps
    cfg = dataclasses.replace(config, init_steps=steps)
    return init_model(X, y, cfg, rng=np.random.default_rng([config.seed, 0xCE]))


def average_precision(scores, positives) -> float:
    """Mean of precision@k over the ranks k of the positive items (scores sorted descending)."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at_k[hits].mean())


def evaluate(model: LinearModel, X, y) -> dict:
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("evaluation dataset is empty")
    y = np.asarray(y)
    pred = model.predict(X)
    out = {"accuracy": float(np.mean(pred == y))}
    if model.NC == 1:
        out["average_precision"] = average_precision(model.decision_function(X), y == model.classes[1])
    return out


# -- CSV I/O -------------------------------------------------------------------

def load_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``label,f0,...,f{D-1}`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: first column must be 'label'")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[1:] != expected:
            raise ValueError(f"{path}: feature columns must be f0..f{len(header) - 2}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no samples")
    labels = np.array([_parse_label(r[0]) for r in rows])
    X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
    return X, labels


def _parse_label(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def save_dataset_csv(path, X, y) -> None:
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(X.shape[1])])
        for label, row in zip(y, X):
            w.writerow([label] + [repr(float(v)) for v in row])


def write_metrics_csv(path, metrics: list[RoundMetrics], timing: bool = False) -> None:
    fields = ["round", "accuracy", "sparsity", "lambda"] + (["wallclock_encrypt_ms"] if timing else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            w.writerow(m.row(timing))


def make_blobs(n_samples: int, D: int, rng: np.random.Generator, informative: int = 3,
               separation: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    """Two Gaussian classes (labels -1/+1) whose means differ only in the first ``informative`` dims."""
    y = np.where(rng.random(n_samples) < 0.5, -1, 1)
    mu = np.zeros(D)
    mu[:informative] = separation / (2 * math.sqrt(informative))
    X = rng.standard_normal((n_samples, D)) + y[:, None] * mu[None, :]
    return X, y
