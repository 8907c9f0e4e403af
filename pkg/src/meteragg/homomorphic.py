"""Multi-party ElGamal-in-the-exponent secure sum.

Configuration: every producer publishes ``y_p = g^x_p`` with a certificate,
the aggregator republishes the validated roster and everyone computes the
joint key ``y = prod y_p``.

Per round, producer ``p`` with reading ``v_p`` draws a mask ``z_p`` and sends
``(c_p, d_p) = (g^r, g^(v_p + z_p) * y^r)``. The aggregator multiplies all
ciphertexts into ``(c, d)``; each producer answers with ``T_p = c^x_p * g^z_p``
and ``d * (prod T_p)^-1 = g^(sum v_p)``, whose bounded discrete log is the sum.
"""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .attestation import Credential, issue_credential, verify_credential
from .bus import Bus, Kind, Subscription
from .dlog import discrete_log
from .errors import (
    BadCredential,
    BadSignature,
    EmptyRound,
    MaskReuse,
    MissingPartial,
    Revoked,
    RosterMismatch,
)
from .group import GroupParams, from_hex, invert, powmod, to_hex
from .model import DEFAULT_V_MAX, MeterId, check_capacity, validate_measurement


@dataclass(frozen=True)
class ProducerKeys:
    meter: MeterId
    x: int
    y: int
    cert: Credential


def producer_keygen(params: GroupParams, meter: MeterId, provisioning_key: Ed25519PrivateKey,
                    rng=None, x: int | None = None) -> ProducerKeys:
    rng = rng or secrets.SystemRandom()
    if x is None:
        x = rng.randrange(1, params.q)
    if not 1 <= x < params.q:
        raise ValueError("private exponent must lie in [1, q-1]")
    y = params.exp(x)
    return ProducerKeys(meter, x, y, issue_credential(provisioning_key, meter, params.encode(y)))


def check_producer_cert(meter: MeterId, y: int, cert: Credential, params: GroupParams,
                        utility_public: bytes) -> None:
    try:
        verify_credential(cert, utility_public)
    except (BadSignature, Revoked) as exc:
        raise BadCredential(meter) from exc
    if cert.meter != meter or cert.public_key != params.encode(y) or not params.is_member(y):
        raise BadCredential(meter)


@dataclass(frozen=True)
class AggregatePublicKey:
    y: int
    roster: tuple[MeterId, ...]


def aggregate_public_key(pubs: Mapping[MeterId, int], params: GroupParams) -> AggregatePublicKey:
    y = 1
    for m in sorted(pubs):
        y = y * params.check_member(pubs[m], f"public key of {m}") % params.p
    return AggregatePublicKey(y, tuple(sorted(pubs)))


@dataclass(frozen=True)
class HomCiphertext:
    c: int
    d: int

    def to_json(self) -> dict:
        return {"c": to_hex(self.c), "d": to_hex(self.d)}

    @classmethod
    def from_json(cls, obj: dict) -> HomCiphertext:
        return cls(from_hex(obj["c"]), from_hex(obj["d"]))

    def check(self, params: GroupParams) -> HomCiphertext:
        params.check_member(self.c, "ciphertext c")
        params.check_member(self.d, "ciphertext d")
        return self


@dataclass(frozen=True)
class PartialDecryption:
    T: int
    meter: MeterId


def _y_of(y: AggregatePublicKey | int) -> int:
    return y.y if isinstance(y, AggregatePublicKey) else y


def encrypt_share(v: int, y: AggregatePublicKey | int, params: GroupParams, rng=None,
                  z: int | None = None, r: int | None = None) -> tuple[HomCiphertext, int]:
    """Masked encryption of ``g^(v+z)`` under the joint key; returns the
    ciphertext and the mask ``z`` the producer must keep for its partial.

    ``z`` and ``r`` are test hooks; normally both are drawn from ``[1, q-1]``.
    """
    rng = rng or secrets.SystemRandom()
    q, p = params.q, params.p
    if not 0 <= v < q:
        raise ValueError("plaintext must lie in [0, q)")
    if z is None:
        z = rng.randrange(1, q)
    if r is None:
        r = rng.randrange(1, q)
    yy = _y_of(y)
    c = powmod(params.g, r, p)
    d = powmod(params.g, (v + z) % q, p) * powmod(yy, r, p) % p
    return HomCiphertext(c, d), z


def combine(cts: Sequence[HomCiphertext], params: GroupParams) -> HomCiphertext:
    if not cts:
        raise EmptyRound("no ciphertexts to combine")
    c, d = 1, 1
    for ct in cts:
        c = c * ct.c % params.p
        d = d * ct.d % params.p
    return HomCiphertext(c, d)


def partial_decrypt(C: HomCiphertext, keys: ProducerKeys | int, z: int, params: GroupParams,
                    meter: MeterId | None = None) -> PartialDecryption:
    if isinstance(keys, ProducerKeys):
        x, meter = keys.x, keys.meter
    else:
        x = keys
    params.check_member(C.c, "combined c")
    T = powmod(C.c, x, params.p) * powmod(params.g, z, params.p) % params.p
    return PartialDecryption(T, meter)


def recover_sum(C: HomCiphertext, parts: Iterable[PartialDecryption], params: GroupParams,
                bound: int, roster: Sequence[MeterId] | None = None) -> int:
    parts = list(parts)
    if roster is not None:
        have = {pd.meter for pd in parts}
        if len(have) != len(parts):
            raise ValueError("duplicate partial decryption")
        for m in roster:
            if m not in have:
                raise MissingPartial(m)
        if have - set(roster):
            raise RosterMismatch("partial decryption from a meter outside the roster")
    C.check(params)
    prod_t = 1
    for pd in parts:
        prod_t = prod_t * params.check_member(pd.T, f"partial of {pd.meter}") % params.p
    D = C.d * invert(prod_t, params.p) % params.p
    return discrete_log(D, params, bound)


# --- protocol roles over the bus ----------------------------------------------------

def _roster_entries(entries: Sequence[dict], region: str, params: GroupParams,
                    utility_public: bytes) -> dict[MeterId, int]:
    pubs: dict[MeterId, int] = {}
    for e in entries:
        m = MeterId(region, e["meter"])
        y = from_hex(e["y"])
        check_producer_cert(m, y, Credential.from_json(e["cert"]), params, utility_public)
        if m in pubs:
            raise RosterMismatch(f"{m} listed twice")
        pubs[m] = y
    return pubs


class Producer:
    def __init__(self, keys: ProducerKeys, params: GroupParams, utility_public: bytes,
                 bus: Bus, topic: str, v_max: int = DEFAULT_V_MAX, rng=None):
        self.keys = keys
        self.meter = keys.meter
        self.params = params
        self.utility_public = utility_public
        self.topic = topic
        self.v_max = v_max
        self.rng = rng or secrets.SystemRandom()
        self.endpoint = bus.endpoint(f"meter/{keys.meter.region}/{keys.meter.index}")
        self.inbox: Subscription = bus.subscribe(topic)
        self.apk: AggregatePublicKey | None = None
        self._masks: dict[int, int] = {}
        self._used: set[int] = set()
        self._rounds: set[int] = set()

    def process(self) -> int:
        handled = 0
        for env in self.inbox:
            if env.kind is Kind.CONFIG_REQ:
                self.endpoint.send_json(self.topic, Kind.PUBKEY, {
                    "meter": self.meter.index, "y": to_hex(self.keys.y),
                    "cert": self.keys.cert.to_json()})
            elif env.kind is Kind.ROSTER:
                self._accept_roster(json.loads(env.payload)["entries"])
            elif env.kind is Kind.COMBINED and env.slot in self._masks:
                C = HomCiphertext.from_json(json.loads(env.payload)).check(self.params)
                z = self._masks.pop(env.slot)
                pd = partial_decrypt(C, self.keys, z, self.params)
                self.endpoint.send_json(self.topic, Kind.PARTIAL,
                                        {"meter": self.meter.index, "T": to_hex(pd.T)}, env.slot)
            else:
                continue
            handled += 1
        return handled

    def _accept_roster(self, entries: Sequence[dict]) -> None:
        pubs = _roster_entries(entries, self.meter.region, self.params, self.utility_public)
        if pubs.get(self.meter) != self.keys.y:
            raise RosterMismatch(f"{self.meter} missing from the published roster")
        self.apk = aggregate_public_key(pubs, self.params)

    def abandon(self, j: int) -> None:
        self._masks.pop(j, None)

    def submit(self, j: int, v: int, z: int | None = None, r: int | None = None) -> HomCiphertext:
        """Encrypt this round's reading and publish it."""
        if self.apk is None:
            raise RosterMismatch("configuration phase not complete")
        if j in self._rounds:
            raise MaskReuse(f"{self.meter} already submitted round {j}")
        validate_measurement(v, self.v_max)
        if z is None:
            if len(self._used) >= self.params.q - 1:
                raise MaskReuse("mask space exhausted")
            z = self.rng.randrange(1, self.params.q)
            while z in self._used:
                z = self.rng.randrange(1, self.params.q)
        elif z in self._used:
            raise MaskReuse(f"mask reused by {self.meter}")
        ct, z = encrypt_share(v, self.apk, self.params, self.rng, z=z, r=r)
        self._used.add(z)
        self._rounds.add(j)
        self._masks[j] = z
        self.endpoint.send_json(self.topic, Kind.CT,
                                {"meter": self.meter.index, **ct.to_json()}, j)
        return ct


class HomAggregator:
    def __init__(self, region: str, roster: Iterable[MeterId], params: GroupParams,
                 utility_public: bytes, bus: Bus, topic: str, v_max: int = DEFAULT_V_MAX):
        self.region = region
        self.expected = tuple(sorted(roster))
        self.params = params
        self.utility_public = utility_public
        self.topic = topic
        self.v_max = v_max
        self.bound = check_capacity(len(self.expected), v_max, 1, params.q)
        self.endpoint = bus.endpoint(f"hom-aggregator/{region}")
        self.inbox = bus.subscribe(topic)
        self.apk: AggregatePublicKey | None = None
        self._pubkeys: dict[MeterId, dict] = {}
        self._cts: dict[int, dict[MeterId, HomCiphertext]] = {}
        self._combined: dict[int, HomCiphertext] = {}
        self._parts: dict[int, dict[MeterId, PartialDecryption]] = {}

    def process(self) -> int:
        handled = 0
        for env in self.inbox:
            if env.kind is Kind.PUBKEY:
                e = json.loads(env.payload)
                m = MeterId(self.region, e["meter"])
                check_producer_cert(m, from_hex(e["y"]), Credential.from_json(e["cert"]),
                                    self.params, self.utility_public)
                self._pubkeys[m] = e
            elif env.kind is Kind.CT:
                e = json.loads(env.payload)
                m = MeterId(self.region, e["meter"])
                self._cts.setdefault(env.slot, {})[m] = HomCiphertext.from_json(e).check(self.params)
            elif env.kind is Kind.PARTIAL:
                e = json.loads(env.payload)
                m = MeterId(self.region, e["meter"])
                T = self.params.check_member(from_hex(e["T"]), f"partial of {m}")
                self._parts.setdefault(env.slot, {})[m] = PartialDecryption(T, m)
            else:
                continue
            handled += 1
        return handled

    def request_config(self) -> None:
        self.endpoint.send_json(self.topic, Kind.CONFIG_REQ, {"region": self.region})

    def publish_roster(self) -> AggregatePublicKey:
        missing = [m for m in self.expected if m not in self._pubkeys]
        if missing:
            raise RosterMismatch(f"no public key from {', '.join(map(str, missing))}")
        entries = [self._pubkeys[m] for m in self.expected]
        pubs = _roster_entries(entries, self.region, self.params, self.utility_public)
        self.apk = aggregate_public_key(pubs, self.params)
        self.endpoint.send_json(self.topic, Kind.ROSTER, {"entries": entries})
        return self.apk

    def received(self, j: int) -> set[MeterId]:
        return set(self._cts.get(j, {}))

    def combine_round(self, j: int) -> HomCiphertext:
        cts = self._cts.get(j, {})
        if not cts:
            raise EmptyRound(f"no ciphertexts for round {j}")
        if set(cts) != set(self.expected):
            raise RosterMismatch(f"round {j} has {len(cts)} of {len(self.expected)} ciphertexts")
        C = combine([cts[m] for m in self.expected], self.params)
        self._combined[j] = C
        self.endpoint.send_json(self.topic, Kind.COMBINED, C.to_json(), j)
        return C

    def abandon(self, j: int) -> None:
        for store in (self._cts, self._combined, self._parts):
            store.pop(j, None)

    def recover_round(self, j: int) -> int:
        C = self._combined.pop(j)
        parts = self._parts.pop(j, {})
        self._cts.pop(j, None)
        V = recover_sum(C, parts.values(), self.params, self.bound, self.expected)
        self.endpoint.send_json(self.topic, Kind.SUM, {"sum": V}, j)
        return V


def pump(*parties) -> None:
    """Let every party handle its inbox until nobody has anything left to do."""
    while sum(p.process() for p in parties):
        pass


def config_phase(producers: Sequence[Producer], aggregator: HomAggregator) -> AggregatePublicKey:
    """Run configuration steps 1-4; every party ends with the same joint key."""
    aggregator.request_config()
    pump(*producers)
    pump(aggregator)
    apk = aggregator.publish_roster()
    pump(*producers)
    for prod in producers:
        if prod.apk != apk:
            raise RosterMismatch(f"{prod.meter} computed a different joint key")
    return apk
