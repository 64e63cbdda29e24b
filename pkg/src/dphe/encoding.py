"""Fixed-point codec between signed reals and the Paillier plaintext ring.

Negative values use the modular representation ``n - |q|`` so that
homomorphic sums of encodings decode to the real sum, provided the
headroom condition ``max_terms * max_magnitude * 2**frac_bits < n / 2``
holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FRAC_BITS = 32


class EncodingOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    n: int
    frac_bits: int = DEFAULT_FRAC_BITS
    max_terms: int = 1
    max_magnitude: float = 1.0

    def __post_init__(self):
        if self.frac_bits < 1:
            raise ValueError("frac_bits must be >= 1")
        if self.max_terms < 1 or self.max_magnitude <= 0:
            raise ValueError("max_terms and max_magnitude must be positive")
        bound = self.max_terms * _scaled_ceiling(self.max_magnitude, self.frac_bits)
        if 2 * bound >= self.n:
            raise EncodingOverflowError(
                f"no headroom: {self.max_terms} terms of magnitude {self.max_magnitude} "
                f"at {self.frac_bits} fractional bits do not fit below n/2"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac_bits

    def encode(self, x: float) -> int:
        x = float(x)
        if not np.isfinite(x) or abs(x) > self.max_magnitude:
            raise EncodingOverflowError(f"|{x}| exceeds max_magnitude {self.max_magnitude}")
        # scaling by a power of two is exact in binary floating point
        q = round(x * self.scale)
        return q % self.n

    def decode(self, m: int) -> float:
        m = int(m) % self.n
        if m > self.n // 2:
            m -= self.n
        return m / self.scale

    def encode_vector(self, xs) -> list[int]:
        return [self.encode(x) for x in np.asarray(xs, dtype=float).ravel()]

    def decode_vector(self, ms) -> np.ndarray:
        return np.array([self.decode(m) for m in ms], dtype=float)

    def params(self) -> dict:
        return {"frac_bits": self.frac_bits, "max_terms": self.max_terms, "max_magnitude": self.max_magnitude}


def _scaled_ceiling(mag: float, frac_bits: int) -> int:
    # largest |round(x * 2**f)| for |x| <= mag
    return round(mag * (1 << frac_bits)) + 1
