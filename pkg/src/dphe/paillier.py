"""Textbook Paillier cryptosystem with ``g = n + 1``.

Plaintexts are integers in ``[0, n)``; the product of two ciphertexts
decrypts to the sum of their plaintexts modulo ``n``.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from functools import cached_property

import gmpy2

DEFAULT_KEY_BITS = 1024
INSECURE_BELOW_BITS = 512
MILLER_RABIN_ROUNDS = 40

_SMALL_PRIMES = (3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)


class PaillierError(Exception):
    pass


class KeyGenerationError(PaillierError):
    pass


class KeyMismatchError(PaillierError):
    pass


class PlaintextRangeError(PaillierError, ValueError):
    pass


def _key_id(n: int) -> str:
    return hashlib.sha256(format(n, "x").encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    bits: int

    @classmethod
    def from_modulus(cls, n: int) -> "PublicKey":
        return cls(n=n, g=n + 1, bits=n.bit_length())

    @cached_property
    def nsquare(self) -> int:
        return self.n * self.n

    @cached_property
    def key_id(self) -> str:
        return _key_id(self.n)

    @property
    def insecure(self) -> bool:
        """True for test-only key sizes."""
        return self.bits < INSECURE_BELOW_BITS


@dataclass(frozen=True)
class PrivateKey:
    lam: int
    mu: int
    p: int
    q: int

    @classmethod
    def from_primes(cls, p: int, q: int) -> "PrivateKey":
        n = p * q
        lam = math.lcm(p - 1, q - 1)
        u = pow(n + 1, lam, n * n)
        mu = pow((u - 1) // n, -1, n)
        return cls(lam=lam, mu=mu, p=p, q=q)

    @property
    def n(self) -> int:
        return self.p * self.q


@dataclass(frozen=True)
class Ciphertext:
    c: int
    key_id: str

    def __repr__(self) -> str:
        return f"Ciphertext(c=0x{self.c:x}, key_id={self.key_id!r})"


def _default_rng() -> random.Random:
    return random.SystemRandom()


def is_probable_prime(n: int, rng: random.Random, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    if n < 2:
        return False
    if n in (2, *_SMALL_PRIMES):
        return True
    if n % 2 == 0 or any(n % sp == 0 for sp in _SMALL_PRIMES):
        return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: random.Random, max_tries: int | None = None) -> int:
    """Random probable prime with exactly ``bits`` bits and its top two bits set."""
    if bits < 3:
        raise KeyGenerationError(f"cannot draw a {bits}-bit prime")
    max_tries = max_tries or 200 * bits
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    for _ in range(max_tries):
        candidate = rng.getrandbits(bits) | top | 1
        if is_probable_prime(candidate, rng):
            return candidate
    raise KeyGenerationError(f"no {bits}-bit prime found after {max_tries} candidates")


def keygen(bits: int = DEFAULT_KEY_BITS, rng: random.Random | None = None,
           max_tries: int = 100) -> tuple[PublicKey, PrivateKey]:
    """Generate a key pair whose modulus has exactly ``bits`` bits.

    Deterministic when ``rng`` is a seeded :class:`random.Random`.
    """
    if bits < 16:
        raise ValueError(f"key size must be at least 16 bits, got {bits}")
    rng = rng or _default_rng()
    half = bits // 2
    for _ in range(max_tries):
        p = random_prime(half, rng)
        q = random_prime(bits - half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits or math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        return PublicKey.from_modulus(n), PrivateKey.from_primes(p, q)
    raise KeyGenerationError(f"could not build a {bits}-bit modulus in {max_tries} attempts")


def random_unit(pk: PublicKey, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


def raw_encrypt(pk: PublicKey, m: int, r: int) -> int:
    # g = n + 1, so g^m mod n^2 = 1 + n*m
    nsq = pk.nsquare
    return int((1 + pk.n * m) * gmpy2.powmod(r, pk.n, nsq) % nsq)


def encrypt(pk: PublicKey, m: int, rng: random.Random | None = None, r: int | None = None) -> Ciphertext:
    if not 0 <= m < pk.n:
        raise PlaintextRangeError(f"plaintext must lie in [0, n); got {m}")
    if r is None:
        r = random_unit(pk, rng or _default_rng())
    elif not 0 < r < pk.n or math.gcd(r, pk.n) != 1:
        raise ValueError("r must be a unit in [1, n)")
    return Ciphertext(raw_encrypt(pk, m, r), pk.key_id)


def encrypt_many(pk: PublicKey, plaintexts, rng: random.Random | None = None,
                 threads: int = 1) -> list[Ciphertext]:
    """Encrypt a batch; randomness is drawn up front so ``threads`` never changes the output."""
    rng = rng or _default_rng()
    ms = [int(m) for m in plaintexts]
    for m in ms:
        if not 0 <= m < pk.n:
            raise PlaintextRangeError(f"plaintext must lie in [0, n); got {m}")
    rs = [random_unit(pk, rng) for _ in ms]
    if threads > 1 and len(ms) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with gmpy2.context(gmpy2.get_context(), allow_release_gil=True), \
                ThreadPoolExecutor(max_workers=threads) as pool:
            cs = list(pool.map(lambda mr: raw_encrypt(pk, *mr), zip(ms, rs)))
    else:
        cs = [raw_encrypt(pk, m, r) for m, r in zip(ms, rs)]
    return [Ciphertext(c, pk.key_id) for c in cs]


def _check_key(pk: PublicKey, ct: Ciphertext) -> None:
    if ct.key_id != pk.key_id:
        raise KeyMismatchError(f"ciphertext bound to key {ct.key_id}, not {pk.key_id}")


def decrypt(sk: PrivateKey, pk: PublicKey, ct: Ciphertext) -> int:
    _check_key(pk, ct)
    if sk.n != pk.n:
        raise KeyMismatchError("private key does not match public key")
    n = pk.n
    u = int(gmpy2.powmod(ct.c, sk.lam, pk.nsquare))
    return (u - 1) // n * sk.mu % n


def add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition: the product of ciphertexts modulo ``n^2``."""
    _check_key(pk, c1)
    _check_key(pk, c2)
    return Ciphertext(c1.c * c2.c % pk.nsquare, pk.key_id)


def enc_zero(pk: PublicKey, rng: random.Random | None = None) -> Ciphertext:
    return encrypt(pk, 0, rng)


# -- serialization -------------------------------------------------------------

def public_key_to_dict(pk: PublicKey) -> dict:
    return {"bits": pk.bits, "n": format(pk.n, "x"), "g": format(pk.g, "x")}


def public_key_from_dict(d: dict) -> PublicKey:
    n, g = int(d["n"], 16), int(d["g"], 16)
    if g != n + 1:
        raise PaillierError("only g = n + 1 keys are supported")
    return PublicKey(n=n, g=g, bits=int(d["bits"]))


def private_key_to_dict(sk: PrivateKey) -> dict:
    return {k: format(v, "x") for k, v in
            (("lambda", sk.lam), ("mu", sk.mu), ("p", sk.p), ("q", sk.q))}


def private_key_from_dict(d: dict) -> PrivateKey:
    return PrivateKey(lam=int(d["lambda"], 16), mu=int(d["mu"], 16), p=int(d["p"], 16), q=int(d["q"], 16))


def dump_keys(pk: PublicKey, sk: PrivateKey, public_path, private_path) -> None:
    with open(public_path, "w") as fh:
        json.dump(public_key_to_dict(pk), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(private_path, "w") as fh:
        json.dump(private_key_to_dict(sk), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_keys(public_path, private_path=None) -> tuple[PublicKey, PrivateKey | None]:
    with open(public_path) as fh:
        pk = public_key_from_dict(json.load(fh))
    sk = None
    if private_path is not None:
        with open(private_path) as fh:
            sk = private_key_from_dict(json.load(fh))
    return pk, sk
