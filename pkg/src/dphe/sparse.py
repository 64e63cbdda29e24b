"""Sparse decomposition ``w = K v`` and capacity sharding.

The index matrix ``K`` is kept in compact form: ``support[m]`` is the row
holding the single one of column ``m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CapacityExceeded(ValueError):
    pass


@dataclass(frozen=True)
class SparseDecomposition:
    dim: int
    support: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.values):
            raise ValueError("support and values must have equal length")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support indices must be pairwise distinct")
        if self.capacity > self.dim:
            raise ValueError("capacity cannot exceed dimension")
        if any(not 0 <= i < self.dim for i in self.support):
            raise ValueError("support index out of range")

    @property
    def capacity(self) -> int:
        return len(self.support)

    def index_matrix(self) -> np.ndarray:
        """Dense ``D x M`` 0/1 matrix. Only for small dimensions."""
        K = np.zeros((self.dim, self.capacity), dtype=np.int8)
        K[list(self.support), np.arange(self.capacity)] = 1
        return K


def nnz(w) -> int:
    return int(np.count_nonzero(np.asarray(w)))


def decompose(w, capacity: int) -> SparseDecomposition:
    """Canonical decomposition: sorted support, padded with the smallest unused indices."""
    w = np.asarray(w, dtype=float).ravel()
    D = w.size
    if not 1 <= capacity <= D:
        raise ValueError(f"capacity must be in [1, {D}], got {capacity}")
    nz = np.flatnonzero(w)
    if nz.size > capacity:
        raise CapacityExceeded(f"{nz.size} non-zeros exceed capacity {capacity}; shard first")
    pad_needed = capacity - nz.size
    if pad_needed:
        free = np.ones(D, dtype=bool)
        free[nz] = False
        pad = np.flatnonzero(free)[:pad_needed]
        support = np.sort(np.concatenate([nz, pad]))
    else:
        support = nz
    return SparseDecomposition(
        dim=D,
        support=tuple(int(i) for i in support),
        values=tuple(float(w[i]) for i in support),
    )


def reconstruct(sd: SparseDecomposition) -> np.ndarray:
    out = np.zeros(sd.dim)
    out[list(sd.support)] = sd.values
    return out


def shard(w, capacity: int) -> list[np.ndarray]:
    """Split ``w`` into ``ceil(nnz / capacity)`` disjoint-support shards (at least one)."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    w = np.asarray(w, dtype=float).ravel()
    nz = np.flatnonzero(w)
    count = max(1, math.ceil(nz.size / capacity))
    shards = []
    for f in range(count):
        part = np.zeros_like(w)
        idx = nz[f * capacity:(f + 1) * capacity]
        part[idx] = w[idx]
        shards.append(part)
    return shards


def sparsity(w) -> float:
    """Fraction of exact zeros."""
    w = np.asarray(w)
    return 1.0 - nnz(w) / w.size if w.size else 0.0
