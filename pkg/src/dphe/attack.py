"""Recovering private samples from unencrypted local updates.

Given the broadcast weights ``w_before`` and a user's update ``w_after``
together with the step size and regularizer, the loss gradient of the
sample that produced the step is

    theta = (w_before - w_after) / gamma - lam * grad_R(w_before)

with ``R(w) = 0.5 * ||w||^2`` for L2. For hinge and logistic losses the
gradient pins down the sample up to a small candidate set. These routines
exist as negative controls: under secure averaging the aggregator never
sees ``w_after``.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .fedlearn import sgd_step
from .protocol import ProtocolConfig, assert_transcript_secure, run_secure_average

NONE, L2 = "none", "l2"


@dataclass
class LeakObservation:
    w_before: np.ndarray
    w_after: np.ndarray
    gamma: float
    lam: float = 0.0
    regularizer: str = NONE

    def __post_init__(self):
        self.w_before = np.asarray(self.w_before, dtype=float)
        self.w_after = np.asarray(self.w_after, dtype=float)
        if self.w_before.shape != self.w_after.shape:
            raise ValueError("w_before and w_after must have equal length")
        if self.regularizer not in (NONE, L2):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")


def compute_theta(obs: LeakObservation) -> np.ndarray:
    if obs.gamma == 0:
        raise ValueError("learning rate must be non-zero")
    theta = (obs.w_before - obs.w_after) / obs.gamma
    if obs.regularizer == L2 and obs.lam:
        theta = theta - obs.lam * obs.w_before
    return theta


@dataclass
class Inversion:
    candidates: list[tuple[np.ndarray, int]]
    margin_satisfied: bool = False
    roots: list[float] = field(default_factory=list)


def invert_hinge(theta) -> Inversion:
    """The hinge gradient is ``-y x`` on an active margin and zero otherwise."""
    theta = np.asarray(theta, dtype=float)
    if not theta.any():
        return Inversion([], margin_satisfied=True)
    return Inversion([(theta.copy(), -1), (-theta, 1)])


def _logistic_roots(c: float) -> list[float]:
    """Solutions ``s`` of ``s = -c * (1 + exp(s))``.

    For ``c > 0`` the root is unique and negative. For ``c < 0`` roots are
    positive and there may be two, since ``s / (1 + exp(s))`` rises then
    falls on ``s > 0``; both explain the observed gradient.
    """
    if c == 0:
        return [0.0]
    if c > 0:
        f = lambda s: s + c * (1.0 + math.exp(s))
        return [_polish(brentq(f, -2.0 * c, -c, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500), c)]

    # c < 0: the sign of f agrees with g, which cannot overflow
    def g(s):
        return math.log(s) - math.log(-c) - np.logaddexp(0.0, s)

    if c <= -1.0:
        raise ValueError(f"no sample explains this gradient (w.theta = {c})")
    peak = math.log(-1.0 / c)
    top = g(peak)
    if top < 0:
        raise ValueError(f"no sample explains this gradient (w.theta = {c})")
    if top == 0:
        return [_polish(peak, c)]
    lo = min(peak, 1.0) * 1e-300
    roots = [brentq(g, lo, peak, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)]
    hi = max(2.0 * peak, 1.0)
    while g(hi) > 0:
        hi *= 2.0
    roots.append(brentq(g, peak, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))
    return [_polish(s, c) for s in roots]


def _polish(s: float, c: float, steps: int = 3) -> float:
    for _ in range(steps):
        if s > 700:
            break
        e = math.exp(s)
        f = s + c * (1.0 + e)
        df = 1.0 + c * e
        if f == 0 or df == 0:
            break
        nxt = s - f / df
        if abs(nxt - s) >= abs(s) * 1e-9 + 1e-300:
            break  # Newton is only a polish; leave bracketed roots alone if it strays
        s = nxt
    return s


def invert_logistic(theta, w_before) -> Inversion:
    """Solve ``theta = -X / (1 + exp(w_before . X))`` for ``X = y x``.

    Candidates are ``(X, +1)`` and ``(-X, -1)`` for every admissible ``X``.
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w_before, dtype=float)
    if not theta.any():
        raise ValueError("logistic gradient is never exactly zero; observation is malformed")
    c = float(w @ theta)
    roots = _logistic_roots(c)
    cands = []
    for s in roots:
        X = -theta * (1.0 + math.exp(min(s, 709.0)))
        cands += [(X, 1), (-X, -1)]
    return Inversion(cands, roots=roots)


def gd_imbalance_leak(theta, K: int) -> tuple[np.ndarray, np.ndarray]:
    """For an all-negative hinge dataset of ``K`` samples, ``K * theta`` sums the misclassified ones."""
    if K < 1:
        raise ValueError("K must be >= 1")
    theta = np.asarray(theta, dtype=float)
    return K * theta, theta


# -- forward simulation --------------------------------------------------------

def hinge_sgd_step(w, x, y, gamma, lam=0.0):
    """One hinge SGD step with the L2 penalty ``lam * 0.5 * ||w||^2``."""
    W = sgd_step(np.asarray(w, dtype=float)[None, :], np.asarray(x, dtype=float),
                 np.array([float(y)]), gamma, lam, 0.0)
    return W[0]


def logistic_sgd_step(w, x, y, gamma, lam=0.0):
    w = np.asarray(w, dtype=float)
    X = y * np.asarray(x, dtype=float)
    grad = -X / (1.0 + math.exp(float(w @ X))) + lam * w
    return w - gamma * grad


def hinge_gd_step(w, X, y, gamma, lam=0.0):
    """Full-batch hinge step: averaged gradient over all ``K`` samples."""
    w = np.asarray(w, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    active = y * (X @ w) < 1.0
    grad = (-(y[active, None] * X[active]).sum(axis=0)) / X.shape[0] + lam * w
    return w - gamma * grad


def dyadic_grid(rng: np.random.Generator, shape, scale_bits: int = 8, max_int: int = 512):
    """Random values ``k / 2**scale_bits``; keeps simulated SGD arithmetic exact."""
    return rng.integers(-max_int, max_int + 1, size=shape) / float(1 << scale_bits)


# -- reports -------------------------------------------------------------------

@dataclass
class AttackConfig:
    loss: str = "hinge"
    gamma: float = 2.0 ** -4
    lam: float = 2.0 ** -3
    regularizer: str = L2
    seed: int = 0
    sample_index: int | None = None
    secure_key_bits: int = 256


def _linf_to_truth(cands, x, y) -> float:
    errs = [float(np.max(np.abs(cx - x))) for cx, cy in cands if cy == y]
    return min(errs) if errs else math.inf


def attack_report(X, y, config: AttackConfig) -> dict:
    """Simulate one observed SGD step on a sample of ``(X, y)`` and attack it.

    Labels are mapped to -1/+1 (the larger label is +1). The ``secure_mode``
    entry reports what the same update looks like once it is routed
    through secure averaging with two other users.
    """
    X = np.asarray(X, dtype=float)
    labels = np.unique(y)
    ypm = np.where(np.asarray(y) == labels[-1], 1, -1)
    rng = np.random.default_rng(config.seed)
    i = int(rng.integers(len(X))) if config.sample_index is None else config.sample_index
    x_true, y_true = X[i], int(ypm[i])
    D = X.shape[1]
    w_before = dyadic_grid(rng, D, max_int=16)
    lam = config.lam if config.regularizer == L2 else 0.0

    if config.loss == "hinge":
        w_after = hinge_sgd_step(w_before, x_true, y_true, config.gamma, lam)
    elif config.loss == "logistic":
        w_after = logistic_sgd_step(w_before, x_true, y_true, config.gamma, lam)
    else:
        raise ValueError(f"unknown loss {config.loss!r}")

    theta = compute_theta(LeakObservation(w_before, w_after, config.gamma, lam, config.regularizer))
    if config.loss == "hinge":
        inv = invert_hinge(theta)
    else:
        inv = invert_logistic(theta, w_before)

    if inv.margin_satisfied:
        err, verdict = None, "margin satisfied: zero gradient, sample not recoverable from this step"
    else:
        err = _linf_to_truth(inv.candidates, x_true, y_true)
        verdict = "sample recovered" if err <= 1e-6 else "recovery failed"

    return {
        "loss": config.loss,
        "sample_index": i,
        "true_sample": {"x": x_true.tolist(), "y": y_true},
        "candidates": [{"x": cx.tolist(), "y": cy} for cx, cy in inv.candidates],
        "linf_error": err,
        "verdict": verdict,
        "secure_mode": secure_counterpart(w_after, rng, config.secure_key_bits),
    }


def secure_counterpart(w_after, rng: np.random.Generator, key_bits: int = 256) -> dict:
    """Route ``w_after`` through secure averaging and inspect what the aggregator saw."""
    w_after = np.asarray(w_after, dtype=float)
    D = w_after.size
    others = rng.standard_normal((2, D))
    weights = np.vstack([w_after, others])
    mag = float(np.max(np.abs(weights))) + 1.0
    cfg = ProtocolConfig(D=D, N=3, M=D, key_bits=key_bits, max_magnitude=mag)
    _, transcript = run_secure_average(cfg, weights, random.Random(int(rng.integers(2**63))))
    report = assert_transcript_secure(transcript)
    exposed = _plaintext_exposed(transcript, w_after)
    if report.passed and not exposed:
        verdict = "nothing to attack: no plaintext update observable"
    else:
        verdict = "plaintext update exposed"
    return {"verdict": verdict, "transcript_secure": report.passed, "messages": len(transcript)}


def _plaintext_exposed(transcript, w) -> bool:
    for msg in transcript:
        p = msg.payload
        if isinstance(p, np.ndarray) and msg.kind != "sum_result":
            if p.shape == w.shape and np.allclose(p, w):
                return True
    return False


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
