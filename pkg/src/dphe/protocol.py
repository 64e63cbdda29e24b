"""Secure averaging of sparse vectors with doubly-permuted supports.

Three kinds of party take part: a key generator, ``N`` users and an
aggregator. They exchange messages only through per-channel FIFO
mailboxes driven by :class:`Network`, and every send is appended to a
:class:`Transcript` so that the information flow can be audited after the
run with :func:`assert_transcript_secure`.

Round structure::

    KG   -> user n     setup (pk, phi, phi_n, M, codec)
    KG   -> aggregator setup (pk, {phi_n})
    user -> aggregator encrypted_update (one per shard), upload_complete
    agg  -> KG         decrypt_request (the accumulated sum only)
    KG   -> agg        sum_result (w_sum)

The aggregator divides by ``N`` in plaintext.
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import paillier
from .encoding import DEFAULT_FRAC_BITS, FixedPointCodec
from .paillier import Ciphertext, PrivateKey, PublicKey
from .permutation import (DimensionMismatch, Permutation, apply_vec, double_permute, inverse,
                          partial_reorder, random_permutation)
from .sparse import decompose, shard

KEY_GENERATOR = "keygen"
AGGREGATOR = "aggregator"
MIN_USERS = 3


def user_name(n: int) -> str:
    return f"user{n}"


class ProtocolError(Exception):
    pass


class ConfigError(ProtocolError, ValueError):
    pass


class UnknownUserError(ProtocolError, KeyError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    D: int
    N: int
    M: int
    key_bits: int = paillier.DEFAULT_KEY_BITS
    frac_bits: int = DEFAULT_FRAC_BITS
    max_magnitude: float = 1e3
    seed: int | None = None
    # N < 3 lets a user subtract its own input from the sum and learn the other's
    allow_insecure_n: bool = False
    # shard indices are only attached to updates in test mode
    expose_shard_ids: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.D < 1:
            raise ConfigError("D must be >= 1")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.N < MIN_USERS and not self.allow_insecure_n:
            raise ConfigError(f"secure averaging requires N >= {MIN_USERS} users, got N={self.N}")
        if not 1 <= self.M <= self.D:
            raise ConfigError(f"capacity M must satisfy 1 <= M <= D, got M={self.M}, D={self.D}")

    @property
    def max_terms(self) -> int:
        return self.N * math.ceil(self.D / self.M)

    def codec(self, n: int) -> FixedPointCodec:
        return FixedPointCodec(n=n, frac_bits=self.frac_bits, max_terms=self.max_terms,
                               max_magnitude=self.max_magnitude)

    def to_dict(self) -> dict:
        keys = ("D", "N", "M", "key_bits", "frac_bits", "max_magnitude", "seed")
        return {k: getattr(self, k) for k in keys}

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "ProtocolConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in names}
        kwargs.update(overrides)
        return cls(**kwargs)


# -- message payloads ----------------------------------------------------------

@dataclass(frozen=True)
class PermutedSupport:
    """Support indices tagged with the permutation layers applied to them."""

    indices: tuple[int, ...]
    layers: tuple[str, ...] = ("phi", "phi_n")

    @property
    def doubly_permuted(self) -> bool:
        return self.layers == ("phi", "phi_n")


@dataclass(frozen=True)
class EncryptedUpdate:
    user_id: int
    enc_values: tuple[Ciphertext, ...]
    permuted_support: PermutedSupport
    shard: int | None = None

    def __post_init__(self):
        if len(self.enc_values) != len(self.permuted_support.indices):
            raise ValueError("enc_values and permuted_support must have equal length")
        if len(set(self.permuted_support.indices)) != len(self.permuted_support.indices):
            raise ValueError("permuted support indices must be pairwise distinct")


@dataclass(frozen=True)
class EncryptedVector:
    """Ciphertext vector in ``phi``-permuted coordinates."""

    values: tuple[Ciphertext, ...]
    contributors: frozenset[int]


@dataclass(frozen=True)
class UserKeyMaterial:
    pk: PublicKey
    phi: Permutation
    phi_n: Permutation
    M: int
    codec: dict


@dataclass(frozen=True)
class AggregatorKeyMaterial:
    pk: PublicKey
    user_perms: dict[int, Permutation]


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    kind: str
    payload: Any = None


class Transcript:
    """Append-only log of every message sent during a run."""

    def __init__(self):
        self._messages: list[Message] = []
        self.timings: dict[str, float] = {}

    def record(self, msg: Message) -> None:
        self._messages.append(msg)

    def __iter__(self):
        return iter(self._messages)

    def __len__(self):
        return len(self._messages)

    def __getitem__(self, i):
        return self._messages[i]

    @property
    def messages(self) -> tuple[Message, ...]:
        return tuple(self._messages)

    def to_jsonl(self) -> str:
        lines = []
        for seq, msg in enumerate(self._messages):
            rec = {"seq": seq, "sender": msg.sender, "receiver": msg.receiver, "kind": msg.kind,
                   "payload": _summarize(msg.payload)}
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def _summarize(payload) -> Any:
    # never writes permutations or private key material
    if payload is None:
        return None
    if isinstance(payload, EncryptedUpdate):
        return {"type": "EncryptedUpdate", "user": payload.user_id, "shard": payload.shard,
                "permuted_support": list(payload.permuted_support.indices),
                "layers": list(payload.permuted_support.layers),
                "ciphertexts": [format(c.c, "x") for c in payload.enc_values]}
    if isinstance(payload, EncryptedVector):
        return {"type": "EncryptedVector", "contributors": sorted(payload.contributors),
                "ciphertexts": [format(c.c, "x") for c in payload.values]}
    if isinstance(payload, UserKeyMaterial):
        return {"type": "UserKeyMaterial", "key_id": payload.pk.key_id, "M": payload.M,
                "codec": payload.codec, "permutations": ["phi", "phi_n"]}
    if isinstance(payload, AggregatorKeyMaterial):
        return {"type": "AggregatorKeyMaterial", "key_id": payload.pk.key_id,
                "user_permutations": sorted(payload.user_perms)}
    if isinstance(payload, np.ndarray):
        return {"type": "ndarray", "values": payload.tolist()}
    return {"type": type(payload).__name__, "repr": repr(payload)[:200]}


# -- party states --------------------------------------------------------------

def _spawn(rng: random.Random) -> random.Random:
    if isinstance(rng, random.SystemRandom):
        return rng
    return random.Random(rng.getrandbits(64))


@dataclass
class KeyGenerator:
    config: ProtocolConfig
    pk: PublicKey
    sk: PrivateKey
    phi: Permutation
    user_perms: dict[int, Permutation]
    codec: FixedPointCodec
    decrypt_requests: int = 0
    timings: dict = field(default_factory=dict)

    name = KEY_GENERATOR

    def setup_messages(self) -> list[Message]:
        msgs = [Message(KEY_GENERATOR, user_name(n), "setup",
                        UserKeyMaterial(self.pk, self.phi, self.user_perms[n], self.config.M,
                                        self.codec.params()))
                for n in range(self.config.N)]
        msgs.append(Message(KEY_GENERATOR, AGGREGATOR, "setup",
                            AggregatorKeyMaterial(self.pk, dict(self.user_perms))))
        return msgs

    def handle(self, msg: Message) -> list[Message]:
        if msg.kind != "decrypt_request":
            raise ProtocolError(f"key generator cannot handle {msg.kind!r}")
        t0 = time.perf_counter()
        w_sum = kg_decrypt_and_reorder(self, msg.payload)
        _tick(self.timings, "decrypt", t0)
        return [Message(KEY_GENERATOR, msg.sender, "sum_result", w_sum)]


@dataclass
class User:
    user_id: int
    rng: random.Random
    pk: PublicKey | None = None
    phi: Permutation | None = None
    phi_n: Permutation | None = None
    M: int | None = None
    codec: FixedPointCodec | None = None
    expose_shard_ids: bool = False
    threads: int = 1
    timings: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return user_name(self.user_id)

    def receive_setup(self, km: UserKeyMaterial) -> None:
        self.pk, self.phi, self.phi_n, self.M = km.pk, km.phi, km.phi_n, km.M
        self.codec = FixedPointCodec(n=km.pk.n, **km.codec)

    def upload(self, w) -> list[Message]:
        t0 = time.perf_counter()
        updates = user_encrypt_update(self, w, self.rng)
        _tick(self.timings, "encrypt", t0)
        out = [Message(self.name, AGGREGATOR, "encrypted_update", u) for u in updates]
        out.append(Message(self.name, AGGREGATOR, "upload_complete", None))
        return out

    def handle(self, msg: Message) -> list[Message]:
        raise ProtocolError(f"user cannot handle {msg.kind!r}")


@dataclass
class Aggregator:
    N: int
    D: int
    rng: random.Random
    pk: PublicKey | None = None
    user_perms: dict[int, Permutation] | None = None
    enc0: Ciphertext | None = None
    accumulator: list[Ciphertext] | None = None
    contributors: set = field(default_factory=set)
    completed: set = field(default_factory=set)
    result: np.ndarray | None = None
    timings: dict = field(default_factory=dict)

    name = AGGREGATOR

    def receive_setup(self, km: AggregatorKeyMaterial) -> None:
        self.pk, self.user_perms = km.pk, dict(km.user_perms)
        # a ciphertext of zero computed once and reused at every untouched position
        self.enc0 = paillier.enc_zero(self.pk, self.rng)
        self.accumulator = [self.enc0] * self.D

    def handle(self, msg: Message) -> list[Message]:
        if msg.kind == "encrypted_update":
            t0 = time.perf_counter()
            agg_accumulate(self, msg.payload)
            _tick(self.timings, "accumulate", t0)
            return []
        if msg.kind == "upload_complete":
            self.completed.add(int(msg.sender.removeprefix("user")))
            if len(self.completed) == self.N:
                payload = EncryptedVector(tuple(self.accumulator), frozenset(self.contributors))
                return [Message(AGGREGATOR, KEY_GENERATOR, "decrypt_request", payload)]
            return []
        if msg.kind == "sum_result":
            self.result = np.asarray(msg.payload, dtype=float) / self.N
            return []
        raise ProtocolError(f"aggregator cannot handle {msg.kind!r}")


def _tick(timings: dict, phase: str, t0: float) -> None:
    timings[phase] = timings.get(phase, 0.0) + (time.perf_counter() - t0) * 1e3


# -- protocol steps ------------------------------------------------------------

@dataclass
class Parties:
    key_generator: KeyGenerator
    users: list[User]
    aggregator: Aggregator

    def by_name(self) -> dict:
        return {KEY_GENERATOR: self.key_generator, AGGREGATOR: self.aggregator,
                **{u.name: u for u in self.users}}


def kg_setup(config: ProtocolConfig, rng: random.Random | None = None) -> tuple[Parties, Transcript]:
    """Generate keys and permutations and distribute them to every party.

    Each user receives ``pk, phi, phi_n, M`` and the codec parameters; the
    aggregator receives ``pk`` and all user-aggregator permutations, never
    ``phi`` or the private key. Every delivery is recorded.
    """
    rng = rng or random.SystemRandom()
    pk, sk = paillier.keygen(config.key_bits, rng)
    codec = config.codec(pk.n)
    phi = random_permutation(config.D, rng)
    user_perms = {n: random_permutation(config.D, rng) for n in range(config.N)}
    kg = KeyGenerator(config=config, pk=pk, sk=sk, phi=phi, user_perms=user_perms, codec=codec)
    users = [User(n, _spawn(rng), expose_shard_ids=config.expose_shard_ids, threads=config.threads)
             for n in range(config.N)]
    agg = Aggregator(config.N, config.D, _spawn(rng))
    parties = Parties(kg, users, agg)

    transcript = Transcript()
    by_name = parties.by_name()
    for msg in kg.setup_messages():
        transcript.record(msg)
        by_name[msg.receiver].receive_setup(msg.payload)
    return parties, transcript


def user_encrypt_update(user: User, w, rng: random.Random | None = None) -> list[EncryptedUpdate]:
    if user.pk is None:
        raise ProtocolError("user has not received key material")
    rng = rng or user.rng
    w = np.asarray(w, dtype=float).ravel()
    if w.size != user.phi.dim:
        raise DimensionMismatch(f"weights of length {w.size} vs D={user.phi.dim}")
    updates = []
    for f, part in enumerate(shard(w, user.M)):
        sd = decompose(part, user.M)
        plaintexts = [user.codec.encode(v) for v in sd.values]
        enc = paillier.encrypt_many(user.pk, plaintexts, rng, threads=user.threads)
        support = PermutedSupport(tuple(double_permute(sd.support, user.phi, user.phi_n)))
        updates.append(EncryptedUpdate(user.user_id, tuple(enc), support,
                                       f if user.expose_shard_ids else None))
    return updates


def agg_accumulate(agg: Aggregator, update: EncryptedUpdate) -> Aggregator:
    if agg.user_perms is None or update.user_id not in agg.user_perms:
        raise UnknownUserError(f"no user-aggregator permutation for user {update.user_id}")
    phi_n = agg.user_perms[update.user_id]
    positions = partial_reorder(update.permuted_support.indices, phi_n)
    acc = agg.accumulator
    for pos, ct in zip(positions, update.enc_values):
        acc[pos] = paillier.add(agg.pk, acc[pos], ct)
    agg.contributors.add(update.user_id)
    return agg


def kg_decrypt_and_reorder(kg: KeyGenerator, accumulator) -> np.ndarray:
    values = accumulator.values if isinstance(accumulator, EncryptedVector) else accumulator
    if len(values) != kg.config.D:
        raise DimensionMismatch(f"accumulator of length {len(values)} vs D={kg.config.D}")
    kg.decrypt_requests += 1
    permuted = np.array([kg.codec.decode(paillier.decrypt(kg.sk, kg.pk, c)) for c in values])
    return apply_vec(inverse(kg.phi), permuted)


class Network:
    """In-process message passing with per-channel FIFO delivery.

    With ``rng=None`` messages are delivered in global send order;
    otherwise the next channel to deliver from is drawn at random.
    """

    def __init__(self, parties: dict, transcript: Transcript, rng: random.Random | None = None):
        self.parties = parties
        self.transcript = transcript
        self.rng = rng
        self._channels: dict[tuple[str, str], deque] = {}
        self._order: deque = deque()

    def send(self, msg: Message) -> None:
        if msg.receiver not in self.parties:
            raise ProtocolError(f"unknown receiver {msg.receiver!r}")
        self.transcript.record(msg)
        key = (msg.sender, msg.receiver)
        self._channels.setdefault(key, deque()).append(msg)
        self._order.append(key)

    def run(self, max_steps: int = 10_000_000) -> None:
        for _ in range(max_steps):
            key = self._next_channel()
            if key is None:
                return
            msg = self._channels[key].popleft()
            for out in self.parties[msg.receiver].handle(msg):
                self.send(out)
        raise ProtocolError("message loop did not terminate")

    def _next_channel(self):
        if self.rng is None:
            return self._order.popleft() if self._order else None
        live = [k for k, q in self._channels.items() if q]
        if not live:
            return None
        return live[self.rng.randrange(len(live))]


def run_secure_average(config: ProtocolConfig, weights, rng: random.Random | None = None,
                       shuffle_delivery: bool = False):
    """Average ``weights`` (``N x D``) without revealing any single row.

    Returns ``(w_bar, transcript)``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape != (config.N, config.D):
        raise DimensionMismatch(f"expected weights of shape ({config.N}, {config.D}), got {weights.shape}")
    if rng is None:
        rng = random.Random(config.seed) if config.seed is not None else random.SystemRandom()
    net_rng = _spawn(rng)

    t0 = time.perf_counter()
    parties, transcript = kg_setup(config, rng)
    setup_ms = (time.perf_counter() - t0) * 1e3
    kg, agg, users = parties.key_generator, parties.aggregator, parties.users
    net = Network(parties.by_name(), transcript, net_rng if shuffle_delivery else None)
    for user in users:
        for msg in user.upload(weights[user.user_id]):
            net.send(msg)
    net.run()
    if agg.result is None:
        raise ProtocolError("protocol finished without a result")

    timings = {"setup": setup_ms, "encrypt": 0.0, "accumulate": 0.0, "decrypt": 0.0}
    for party in (kg, agg, *users):
        for phase, ms in party.timings.items():
            timings[phase] += ms
    transcript.timings = timings
    return agg.result, transcript


# -- auditing ------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    seq: int
    rule: str
    detail: str


@dataclass
class SecurityReport:
    violations: list[Violation]
    messages_checked: int

    @property
    def passed(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.passed:
            return f"PASS ({self.messages_checked} messages)"
        lines = [f"FAIL ({len(self.violations)} violations)"]
        lines += [f"  #{v.seq} {v.rule}: {v.detail}" for v in self.violations]
        return "\n".join(lines)


_USER_TO_AGG = {"encrypted_update": EncryptedUpdate, "upload_complete": type(None)}


def assert_transcript_secure(transcript: Transcript) -> SecurityReport:
    """Audit a transcript against the semi-honest information-flow contract.

    Checks that nothing reaching the aggregator or another user carries a
    plaintext value, an un-permuted support or secret key material, and
    that the only decryption ever requested is of the sum over all users.
    """
    violations: list[Violation] = []
    users: set[int] | None = None
    decrypt_requests = 0

    def flag(seq, rule, detail):
        violations.append(Violation(seq, rule, detail))

    for seq, msg in enumerate(transcript):
        s, r, p = msg.sender, msg.receiver, msg.payload
        if s == KEY_GENERATOR:
            if r == AGGREGATOR and msg.kind == "setup":
                if not isinstance(p, AggregatorKeyMaterial):
                    flag(seq, "key-material", f"aggregator setup carries {type(p).__name__}")
                else:
                    users = set(p.user_perms)
            elif r == AGGREGATOR and msg.kind == "sum_result":
                if decrypt_requests == 0:
                    flag(seq, "unrequested-result", "plaintext sent to aggregator without a request")
            elif r.startswith("user") and msg.kind == "setup":
                if not isinstance(p, UserKeyMaterial):
                    flag(seq, "key-material", f"user setup carries {type(p).__name__}")
            else:
                flag(seq, "unexpected-message", f"{s}->{r} {msg.kind}")
            _scan_secrets(seq, p, flag)
            continue

        if s.startswith("user") and (r == AGGREGATOR or r.startswith("user")):
            expected = _USER_TO_AGG.get(msg.kind) if r == AGGREGATOR else None
            if expected is None or not isinstance(p, expected):
                flag(seq, "plaintext-leak", f"{s}->{r} {msg.kind} carries {type(p).__name__}")
            elif isinstance(p, EncryptedUpdate):
                if not p.permuted_support.doubly_permuted:
                    flag(seq, "raw-support", f"support layers {p.permuted_support.layers}")
                if not all(isinstance(c, Ciphertext) for c in p.enc_values):
                    flag(seq, "plaintext-leak", "update values are not all ciphertexts")
                if user_name(p.user_id) != s:
                    flag(seq, "impersonation", f"{s} sent an update labelled user {p.user_id}")
            _scan_secrets(seq, p, flag)
            continue

        if s == AGGREGATOR and r == KEY_GENERATOR and msg.kind == "decrypt_request":
            decrypt_requests += 1
            if decrypt_requests > 1:
                flag(seq, "extra-decrypt", "more than one decryption requested")
            if not isinstance(p, EncryptedVector):
                flag(seq, "individual-decrypt", f"decrypt request carries {type(p).__name__}")
            elif users is None or set(p.contributors) != users:
                flag(seq, "individual-decrypt",
                     f"decrypt request covers users {sorted(p.contributors)}, not all users")
            continue

        flag(seq, "unexpected-message", f"{s}->{r} {msg.kind}")

    if decrypt_requests == 0:
        violations.append(Violation(-1, "incomplete", "no decrypt request in transcript"))
    return SecurityReport(violations, len(transcript))


def _scan_secrets(seq, payload, flag) -> None:
    if isinstance(payload, PrivateKey):
        flag(seq, "secret-key", "private key in message")
    elif isinstance(payload, AggregatorKeyMaterial):
        if any(not isinstance(v, Permutation) for v in payload.user_perms.values()):
            flag(seq, "key-material", "malformed user permutation")
    elif isinstance(payload, (list, tuple)):
        for item in payload:
            _scan_secrets(seq, item, flag)
    elif isinstance(payload, dict):
        for item in payload.values():
            _scan_secrets(seq, item, flag)
