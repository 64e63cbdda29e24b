"""Permutations of ``[0, D)`` stored as destination maps.

``dest[j]`` is the new position of the element originally at ``j``. The
equivalent permutation matrix ``P`` has ``P[dest[j], j] = 1``, so
``apply_vec(p, x) == P @ x`` and ``apply_support`` is ``P @ K`` on an
index matrix in compact form.
"""

from __future__ import annotations

import random

import numpy as np


class DimensionMismatch(ValueError):
    pass


class Permutation:
    __slots__ = ("dest",)

    def __init__(self, dest):
        dest = np.asarray(dest, dtype=np.int64)
        if dest.ndim != 1 or dest.size == 0:
            raise ValueError("dest must be a non-empty 1-D index array")
        check = np.zeros(dest.size, dtype=bool)
        if dest.min() < 0 or dest.max() >= dest.size:
            raise ValueError("dest is not a bijection on [0, D)")
        check[dest] = True
        if not check.all():
            raise ValueError("dest is not a bijection on [0, D)")
        dest.setflags(write=False)
        self.dest = dest

    @classmethod
    def identity(cls, D: int) -> "Permutation":
        return cls(np.arange(D))

    @property
    def dim(self) -> int:
        return self.dest.size

    def matrix(self) -> np.ndarray:
        P = np.zeros((self.dim, self.dim), dtype=np.int8)
        P[self.dest, np.arange(self.dim)] = 1
        return P

    def to_list(self) -> list[int]:
        return self.dest.tolist()

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.dest, other.dest)

    def __hash__(self):
        return hash(self.dest.tobytes())

    def __repr__(self):
        head = self.dest[:8].tolist()
        return f"Permutation(D={self.dim}, dest={head}{'...' if self.dim > 8 else ''})"


def random_permutation(D: int, rng: random.Random) -> Permutation:
    """Uniform Fisher-Yates shuffle driven by ``rng``."""
    if D < 1:
        raise ValueError("D must be >= 1")
    dest = list(range(D))
    rng.shuffle(dest)
    return Permutation(dest)


def apply_vec(p: Permutation, x):
    x = np.asarray(x)
    if x.shape[0] != p.dim:
        raise DimensionMismatch(f"vector of length {x.shape[0]} vs permutation of dim {p.dim}")
    y = np.empty_like(x)
    y[p.dest] = x
    return y


def apply_list(p: Permutation, xs: list) -> list:
    """:func:`apply_vec` for arbitrary Python objects (e.g. ciphertexts)."""
    if len(xs) != p.dim:
        raise DimensionMismatch(f"list of length {len(xs)} vs permutation of dim {p.dim}")
    out = [None] * p.dim
    for j, d in enumerate(p.dest.tolist()):
        out[d] = xs[j]
    return out


def apply_support(p: Permutation, support) -> list[int]:
    support = [int(r) for r in support]
    if any(not 0 <= r < p.dim for r in support):
        raise IndexError(f"support index out of range for dim {p.dim}")
    dest = p.dest
    return [int(dest[r]) for r in support]


def inverse(p: Permutation) -> Permutation:
    inv = np.empty_like(p.dest)
    inv[p.dest] = np.arange(p.dim)
    return Permutation(inv)


def compose(outer: Permutation, inner: Permutation) -> Permutation:
    """Permutation equal to applying ``inner`` then ``outer``."""
    _same_dim(outer, inner)
    return Permutation(outer.dest[inner.dest])


def double_permute(support, phi: Permutation, phi_n: Permutation) -> list[int]:
    """Support of ``phi_n @ phi @ K``."""
    _same_dim(phi, phi_n)
    return apply_support(phi_n, apply_support(phi, support))


def partial_reorder(permuted_support, phi_n: Permutation) -> list[int]:
    """Undo the user-aggregator layer, leaving the support of ``phi @ K``."""
    if any(not 0 <= int(r) < phi_n.dim for r in permuted_support):
        raise DimensionMismatch(f"support index out of range for dim {phi_n.dim}")
    return apply_support(inverse(phi_n), permuted_support)


def _same_dim(a: Permutation, b: Permutation) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"permutation dims differ: {a.dim} vs {b.dim}")
