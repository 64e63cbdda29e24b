"""Wallclock benchmarks for sparse encryption and the averaging protocol."""

from __future__ import annotations

import contextlib
import csv
import gc
import math
import os
import platform
import random
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import paillier
from .protocol import ProtocolConfig, kg_setup, run_secure_average, user_encrypt_update

CSV_FIELDS = ["D", "M", "bits", "sparsity", "phase", "median_ms", "reps", "threads"]
MIN_REPS = 3


def thread_cap(requested: int = 1) -> int:
    cap = os.environ.get("DPHE_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


@dataclass
class BenchRecord:
    D: int
    M: int
    key_bits: int
    sparsity: float
    reps: int
    phases: dict[str, float] = field(default_factory=dict)
    threads: int = 1
    machine: str = field(default_factory=lambda: f"{platform.machine()} {platform.python_implementation()}")

    def __post_init__(self):
        if self.reps < MIN_REPS:
            raise ValueError(f"at least {MIN_REPS} repetitions are required, got {self.reps}")

    def rows(self) -> list[dict]:
        return [{"D": self.D, "M": self.M, "bits": self.key_bits, "sparsity": self.sparsity,
                 "phase": phase, "median_ms": f"{ms:.3f}", "reps": self.reps, "threads": self.threads}
                for phase, ms in self.phases.items()]


def sparse_vector(D: int, sparsity: float, rng: np.random.Generator) -> np.ndarray:
    """Random vector with exactly ``round((1 - sparsity) * D)`` non-zeros (at least one)."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    k = max(1, round((1.0 - sparsity) * D))
    w = np.zeros(D)
    idx = rng.choice(D, size=k, replace=False)
    w[idx] = rng.uniform(-1.0, 1.0, size=k)
    w[idx[w[idx] == 0]] = 0.5
    return w


@contextlib.contextmanager
def _gc_paused():
    # as timeit does: collector pauses would land inside short phases
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _median_ms(fn, reps: int) -> float:
    fn()  # warm-up, discarded
    times = []
    for _ in range(reps):
        with _gc_paused():
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_encrypt(D: int, sparsity: float, key_bits: int = 1024, reps: int = MIN_REPS, seed: int = 0,
                  threads: int = 1, M: int | None = None) -> BenchRecord:
    """Time one user's sparse encryption with capacity ``M = nnz`` (or the given ``M``)."""
    if reps < MIN_REPS:
        raise ValueError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    rng = np.random.default_rng(seed)
    w = sparse_vector(D, sparsity, rng)
    M = M or max(1, int(np.count_nonzero(w)))
    cfg = ProtocolConfig(D=D, N=3, M=M, key_bits=key_bits, threads=thread_cap(threads))
    parties, _ = kg_setup(cfg, random.Random(seed))
    user = parties.users[0]
    prng = random.Random(seed + 1)
    ms = _median_ms(lambda: user_encrypt_update(user, w, prng), reps)
    return BenchRecord(D, M, key_bits, sparsity, reps, {"encrypt": ms}, cfg.threads)


def bench_dense_encrypt(D: int, key_bits: int = 1024, reps: int = MIN_REPS, seed: int = 0,
                        threads: int = 1) -> BenchRecord:
    """Element-wise encryption of all ``D`` coordinates, no decomposition."""
    pk, _ = paillier.keygen(key_bits, random.Random(seed))
    rng = random.Random(seed + 1)
    threads = thread_cap(threads)
    ms = _median_ms(lambda: paillier.encrypt_many(pk, [1] * D, rng, threads=threads), reps)
    return BenchRecord(D, D, key_bits, 0.0, reps, {"dense_encrypt": ms}, threads)


def bench_sparse_vs_dense(D: int, key_bits: int = 1024, reps: int = 5, seed: int = 0,
                          sparsity: float = 0.0) -> BenchRecord:
    """Paired timing of the sparse path and plain element-wise encryption.

    Runs alternate so that both medians see the same machine conditions.
    """
    if reps < MIN_REPS:
        raise ValueError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    rng = np.random.default_rng(seed)
    w = sparse_vector(D, sparsity, rng)
    M = max(1, int(np.count_nonzero(w)))
    cfg = ProtocolConfig(D=D, N=3, M=M, key_bits=key_bits)
    parties, _ = kg_setup(cfg, random.Random(seed))
    user = parties.users[0]
    dense = user.codec.encode_vector(rng.uniform(-1.0, 1.0, size=D))
    prng = random.Random(seed + 1)
    runs = {"encrypt": lambda: user_encrypt_update(user, w, prng),
            "dense_encrypt": lambda: paillier.encrypt_many(user.pk, dense, prng)}
    samples = {k: [] for k in runs}
    for rep in range(reps + 1):
        for phase, fn in runs.items():
            with _gc_paused():
                t0 = time.perf_counter()
                fn()
            if rep:
                samples[phase].append((time.perf_counter() - t0) * 1e3)
    return BenchRecord(D, M, key_bits, sparsity, reps, {k: statistics.median(v) for k, v in samples.items()})


def bench_protocol(D: int, N: int, M: int, key_bits: int = 1024, reps: int = MIN_REPS,
                   sparsity: float = 0.9, seed: int = 0, zero_inputs: bool = False) -> BenchRecord:
    """Per-phase medians (encrypt, accumulate, decrypt+reorder) of a full secure average."""
    if reps < MIN_REPS:
        raise ValueError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    rng = np.random.default_rng(seed)
    if zero_inputs:
        weights = np.zeros((N, D))
    else:
        weights = np.stack([sparse_vector(D, sparsity, rng) for _ in range(N)])
    cfg = ProtocolConfig(D=D, N=N, M=M, key_bits=key_bits)
    samples: dict[str, list[float]] = {}
    for rep in range(reps + 1):
        with _gc_paused():
            _, transcript = run_secure_average(cfg, weights, random.Random(seed * 7919 + rep))
        if rep == 0:
            continue  # warm-up
        for phase, ms in transcript.timings.items():
            samples.setdefault(phase, []).append(ms)
    phases = {phase: statistics.median(v) for phase, v in samples.items()}
    return BenchRecord(D, M, key_bits, 0.0 if zero_inputs else sparsity, reps, phases)


def bench_protocol_sweep(D: int, Ns, M: int, key_bits: int = 1024, reps: int = MIN_REPS,
                         sparsity: float = 0.9, seed: int = 0) -> list[BenchRecord]:
    """:func:`bench_protocol` over several user counts with interleaved repetitions.

    Each repetition runs every ``N`` once, so slow drift in machine load
    is shared by all points of a scaling regression.
    """
    if reps < MIN_REPS:
        raise ValueError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    rng = np.random.default_rng(seed)
    inputs = {N: np.stack([sparse_vector(D, sparsity, rng) for _ in range(N)]) for N in Ns}
    samples: dict[int, dict[str, list[float]]] = {N: {} for N in Ns}
    for rep in range(reps + 1):
        for N in Ns:
            cfg = ProtocolConfig(D=D, N=N, M=M, key_bits=key_bits)
            with _gc_paused():
                _, transcript = run_secure_average(cfg, inputs[N], random.Random(seed * 7919 + rep))
            if rep == 0:
                continue
            for phase, ms in transcript.timings.items():
                samples[N].setdefault(phase, []).append(ms)
    return [BenchRecord(D, M, key_bits, sparsity, reps, {p: statistics.median(v) for p, v in samples[N].items()})
            for N in Ns]


def linear_fit_r2(xs, ys) -> tuple[float, float]:
    """Least-squares slope and coefficient of determination."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    return float(coef[0]), (1.0 - ss_res / ss_tot) if ss_tot else 1.0


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            for row in rec.rows():
                w.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"bench CSV columns {reader.fieldnames} != {CSV_FIELDS}")
        return list(reader)


def speedup(dense_ms: float, sparse_ms: float) -> float:
    return dense_ms / sparse_ms if sparse_ms > 0 else math.inf
