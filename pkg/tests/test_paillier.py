import json
import math
import random
from functools import reduce

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dphe import paillier
from dphe.paillier import Ciphertext, KeyMismatchError, PlaintextRangeError


def _trial_division_prime(n):
    if n < 2:
        return False
    return all(n % d for d in range(2, math.isqrt(n) + 1))


def test_toy_key_parameters(toy_keys):
    pk, sk = toy_keys
    assert (pk.n, pk.g) == (15, 16)
    assert (sk.lam, sk.mu) == (4, 4)


def test_hand_computed_encryption(toy_keys):
    pk, _ = toy_keys
    # (1 + 15*7) * 2**15 mod 225
    assert (1 + 15 * 7) * pow(2, 15, 225) % 225 == 83
    assert paillier.encrypt(pk, 7, r=2).c == 83


def test_hand_computed_decryption(toy_keys):
    pk, sk = toy_keys
    assert paillier.decrypt(sk, pk, Ciphertext(83, pk.key_id)) == 7


def test_hand_computed_addition(toy_keys):
    pk, sk = toy_keys
    c = paillier.add(pk, paillier.encrypt(pk, 3, r=2), paillier.encrypt(pk, 4, r=7))
    assert c.c == paillier.encrypt(pk, 3, r=2).c * paillier.encrypt(pk, 4, r=7).c % 225
    assert paillier.decrypt(sk, pk, c) == 7


def test_exhaustive_toy_roundtrip(toy_keys):
    pk, sk = toy_keys
    units = [r for r in range(1, 15) if math.gcd(r, 15) == 1]
    for m in range(15):
        for r in units:
            assert paillier.decrypt(sk, pk, paillier.encrypt(pk, m, r=r)) == m


def test_keygen_16_bits_roundtrip():
    pk, sk = paillier.keygen(16, random.Random(1))
    assert pk.bits == 16 and pk.n.bit_length() == 16
    rng = random.Random(7)
    for m in rng.sample(range(pk.n), 300):
        assert paillier.decrypt(sk, pk, paillier.encrypt(pk, m, rng)) == m


@pytest.mark.parametrize("bits", [16, 64, 256])
def test_key_invariants(bits):
    pk, sk = paillier.keygen(bits, random.Random(bits))
    n = pk.n
    assert n % 2 == 1 and pk.g == n + 1 and n.bit_length() == bits
    assert sk.p * sk.q == n and sk.p != sk.q
    assert math.gcd(n, (sk.p - 1) * (sk.q - 1)) == 1
    assert sk.lam == math.lcm(sk.p - 1, sk.q - 1)
    L = (pow(pk.g, sk.lam, n * n) - 1) // n
    assert sk.mu * L % n == 1
    assert pk.insecure == (bits < 512)


def test_keygen_deterministic_and_seed_sensitive():
    a = paillier.keygen(128, random.Random(5))
    b = paillier.keygen(128, random.Random(5))
    c = paillier.keygen(128, random.Random(6))
    assert a == b
    assert a[0].n != c[0].n


def test_keygen_rejects_tiny_keys():
    with pytest.raises(ValueError):
        paillier.keygen(8, random.Random(0))


def test_miller_rabin_matches_trial_division():
    rng = random.Random(3)
    for n in range(2, 5000):
        assert paillier.is_probable_prime(n, rng) == _trial_division_prime(n), n


def test_random_prime_has_requested_size():
    rng = random.Random(9)
    p = paillier.random_prime(20, rng)
    assert p.bit_length() == 20 and _trial_division_prime(p)


def test_plaintext_range_checked(keys64):
    pk, _ = keys64
    with pytest.raises(PlaintextRangeError):
        paillier.encrypt(pk, pk.n, random.Random(0))
    with pytest.raises(PlaintextRangeError):
        paillier.encrypt(pk, -1, random.Random(0))


def test_key_mismatch_detected(keys64, keys256):
    pk1, sk1 = keys64
    pk2, sk2 = keys256
    c1 = paillier.encrypt(pk1, 1, random.Random(0))
    c2 = paillier.encrypt(pk2, 1, random.Random(0))
    with pytest.raises(KeyMismatchError):
        paillier.add(pk1, c1, c2)
    with pytest.raises(KeyMismatchError):
        paillier.decrypt(sk2, pk2, c1)
    with pytest.raises(KeyMismatchError):
        paillier.decrypt(sk1, pk2, c2)


def test_enc_zero(keys256):
    pk, sk = keys256
    rng = random.Random(1)
    z1, z2 = paillier.enc_zero(pk, rng), paillier.enc_zero(pk, rng)
    assert paillier.decrypt(sk, pk, z1) == 0
    assert z1.c != 1 and z1 != z2
    c = paillier.encrypt(pk, 42, rng)
    s = paillier.add(pk, c, z1)
    assert s != c
    assert paillier.decrypt(sk, pk, s) == 42


def test_fold_of_five_ones(keys256):
    pk, sk = keys256
    rng = random.Random(2)
    total = reduce(lambda a, b: paillier.add(pk, a, b), [paillier.encrypt(pk, 1, rng) for _ in range(5)])
    assert paillier.decrypt(sk, pk, total) == 5


def test_probabilistic_encryption(keys64):
    pk, _ = keys64
    rng = random.Random(11)
    cs = {paillier.encrypt(pk, 123, rng).c for _ in range(100)}
    assert len(cs) == 100


def test_encrypt_many_is_thread_count_independent(keys256):
    pk, sk = keys256
    ms = list(range(40))
    a = paillier.encrypt_many(pk, ms, random.Random(4), threads=1)
    b = paillier.encrypt_many(pk, ms, random.Random(4), threads=4)
    assert a == b
    assert [paillier.decrypt(sk, pk, c) for c in a] == ms


def test_key_json_roundtrip(tmp_path, keys256):
    pk, sk = keys256
    pub, priv = tmp_path / "pub.json", tmp_path / "priv.json"
    paillier.dump_keys(pk, sk, pub, priv)
    assert set(json.loads(pub.read_text())) == {"bits", "n", "g"}
    assert set(json.loads(priv.read_text())) == {"lambda", "mu", "p", "q"}
    assert json.loads(pub.read_text())["n"] == format(pk.n, "x")
    pk2, sk2 = paillier.load_keys(pub, priv)
    assert (pk2, sk2) == (pk, sk)


@given(m=st.integers(min_value=0))
def test_roundtrip_property(keys256, m):
    pk, sk = keys256
    m %= pk.n
    assert paillier.decrypt(sk, pk, paillier.encrypt(pk, m, random.Random(m))) == m


@given(m1=st.integers(min_value=0), m2=st.integers(min_value=0))
def test_additive_homomorphism_property(keys256, m1, m2):
    pk, sk = keys256
    m1, m2 = m1 % pk.n, m2 % pk.n
    rng = random.Random(m1 ^ m2)
    c = paillier.add(pk, paillier.encrypt(pk, m1, rng), paillier.encrypt(pk, m2, rng))
    assert paillier.decrypt(sk, pk, c) == (m1 + m2) % pk.n


@given(ms=st.lists(st.integers(min_value=0, max_value=2**300), min_size=1, max_size=100))
def test_fold_matches_integer_sum(keys256, ms):
    pk, sk = keys256
    ms = [m % pk.n for m in ms]
    rng = random.Random(len(ms))
    total = reduce(lambda a, b: paillier.add(pk, a, b), paillier.encrypt_many(pk, ms, rng))
    assert paillier.decrypt(sk, pk, total) == sum(ms) % pk.n
