"""Trusted aggregation core.

``Enclave`` is a software stand-in for an SGX enclave: one object, no module
state, and every plaintext reading stays behind its methods. The only values
it returns are per-slot regional sums (or a flag) and end-of-period per-meter
billing totals. Its measurement covers the code identity string and the
substitution policy.
"""

from __future__ import annotations

import secrets
import struct
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .attestation import (
    CHALLENGE_BYTES,
    ENCLAVE_CODE_IDENTITY,
    AttestationAuthority,
    Credential,
    EnclaveMeasurement,
    EphemeralKey,
    Quote,
    SessionKeys,
    _verify,
    compute_measurement,
    derive_session_key,
    issue_quote,
    key_confirmation,
    key_digest,
    transcript_hash,
    verify_credential,
)
from .channel import EncryptedMeasurement, open_measurement
from .errors import (
    BadSignature,
    DuplicateSlot,
    PeriodIncomplete,
    PeriodNotClosed,
    SlotAlreadyClosed,
    SlotNotOpen,
    UnknownSession,
)
from .model import DEFAULT_V_MAX, AggregateRecord, BillingRecord, MeterId


@dataclass(frozen=True)
class SubstitutionPolicy:
    window: int = 3
    max_failed_fraction: Fraction = Fraction(1, 5)

    def __post_init__(self):
        frac = self.max_failed_fraction
        if not isinstance(frac, Fraction):
            # str() keeps 0.2 as 1/5 instead of its binary expansion
            object.__setattr__(self, "max_failed_fraction", Fraction(str(frac)))
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.max_failed_fraction <= 1:
            raise ValueError("max_failed_fraction must lie in [0, 1]")

    def canonical(self) -> bytes:
        f = self.max_failed_fraction
        return f"window={self.window};max_failed_fraction={f.numerator}/{f.denominator}".encode()

    def to_json(self) -> dict:
        return {"window": self.window, "max_failed_fraction": str(self.max_failed_fraction)}


class ReleaseGate:
    """Billing totals leave once per meter per period, and only at period end."""

    def __init__(self, t: int):
        self.t = t
        self.released: set[tuple[MeterId, int]] = set()

    def release(self, meter: MeterId, period: int) -> None:
        key = (meter, period)
        if key in self.released:
            raise PeriodNotClosed(f"billing for {meter} period {period} already released")
        self.released.add(key)


class SlotAggregator:
    """Per-slot sums with average substitution, plus billing accumulators.

    Readings enter through :meth:`add` already in the clear; the enclave calls
    it after decryption, the plaintext baseline calls it directly.
    """

    def __init__(self, roster: Iterable[MeterId], policy: SubstitutionPolicy, t: int,
                 start_slot: int = 1):
        self.roster = tuple(sorted(set(roster)))
        if not self.roster:
            raise ValueError("empty roster")
        self.policy = policy
        self.t = t
        self.gate = ReleaseGate(t)
        self.current = start_slot
        self.period = 1
        self.closed_in_period = 0
        self.history = {m: deque(maxlen=policy.window) for m in self.roster}
        self.billing = {m: 0 for m in self.roster}
        self.last_slot = {m: 0 for m in self.roster}
        self._slot_sum = 0
        self._present = 0

    @property
    def n(self) -> int:
        return len(self.roster)

    def _check_open(self, slot: int) -> None:
        if slot < self.current:
            raise SlotAlreadyClosed(f"slot {slot} already closed")
        if slot > self.current:
            raise SlotNotOpen(f"slot {slot} is not open (current {self.current})")
        if self.closed_in_period >= self.t:
            raise PeriodNotClosed("close the billing period before the next slot")

    def check_fresh(self, meter: MeterId, slot: int) -> None:
        if meter not in self.billing:
            raise UnknownSession(f"{meter} is not on the roster")
        self._check_open(slot)
        if self.last_slot[meter] == slot:
            raise DuplicateSlot(meter, slot)

    def add(self, meter: MeterId, slot: int, v: int) -> None:
        self.check_fresh(meter, slot)
        self.last_slot[meter] = slot
        self._slot_sum += v
        self._present += 1
        self.billing[meter] += v
        self.history[meter].append(v)

    def close_slot(self, j: int) -> AggregateRecord:
        self._check_open(j)
        missing = [m for m in self.roster if self.last_slot[m] != j]
        contributing = self.n - len(missing)
        total, substituted, reason = self._slot_sum, 0, None
        if Fraction(len(missing), self.n) > self.policy.max_failed_fraction:
            reason = "failed_fraction"
        elif any(not self.history[m] for m in missing):
            reason = "no_history"
        else:
            for m in missing:
                h = self.history[m]
                total += sum(h) // len(h)
                substituted += 1
        self._slot_sum = 0
        self._present = 0
        self.current += 1
        self.closed_in_period += 1
        if reason is not None:
            return AggregateRecord(j, None, contributing, 0, True, reason)
        return AggregateRecord(j, total, contributing, substituted, False)

    def close_period(self) -> list[BillingRecord]:
        if self.closed_in_period < self.t:
            raise PeriodIncomplete(self.closed_in_period, self.t)
        out = []
        for m in self.roster:
            self.gate.release(m, self.period)
            out.append(BillingRecord(m, self.period, self.billing[m]))
            self.billing[m] = 0
            self.history[m].clear()
        self.period += 1
        self.closed_in_period = 0
        return out


class _Session:
    __slots__ = ("keys", "aead", "last_seen")

    def __init__(self, keys: SessionKeys):
        self.keys = keys
        self.aead = AESGCM(keys.channel_key)
        self.last_seen = 0


class Enclave:
    def __init__(self, roster: Iterable[MeterId], policy: SubstitutionPolicy, t: int,
                 authority: AttestationAuthority, utility_public: bytes,
                 code_identity: str = ENCLAVE_CODE_IDENTITY, v_max: int = DEFAULT_V_MAX,
                 rng=None):
        self.__agg = SlotAggregator(roster, policy, t)
        self.__policy = policy
        self.__code_identity = code_identity
        self.__authority = authority
        self.__utility_public = utility_public
        self.__v_max = v_max
        self.__rng = rng or secrets.SystemRandom()
        self.__sessions: dict[MeterId, _Session] = {}
        self.__pending: dict[MeterId, tuple[SessionKeys, bytes]] = {}
        self.__next_sid = 1

    # -- identity -------------------------------------------------------------

    @property
    def measurement(self) -> EnclaveMeasurement:
        return compute_measurement(self.__code_identity, self.__policy)

    @property
    def roster(self) -> tuple[MeterId, ...]:
        return self.__agg.roster

    def has_session(self, meter: MeterId) -> bool:
        return meter in self.__sessions

    # -- attestation ----------------------------------------------------------

    def accept_challenge(self, cred: Credential, challenge: bytes, meter_pub: bytes,
                         signature: bytes, slot: int = 0) -> tuple[Quote, bytes, bytes]:
        """Answer a meter's challenge with a quote binding a fresh enclave key.

        The meter signs ``challenge || meter_pub`` with its credential key, so
        the untrusted host cannot splice in its own key. A new challenge
        replaces any pending one for the same meter.
        """
        meter = verify_credential(cred, self.__utility_public)
        if meter not in self.__agg.billing:
            raise UnknownSession(f"{meter} is not on this enclave's roster")
        if len(challenge) != CHALLENGE_BYTES:
            raise BadSignature("malformed challenge")
        _verify(cred.public_key, signature, challenge_message(challenge, meter_pub))
        eph = EphemeralKey(rng=self.__rng)
        sid = self.__next_sid.to_bytes(4, "big")
        self.__next_sid += 1
        quote = issue_quote(self.__authority, self.measurement, challenge, eph.public)
        th = transcript_hash(meter, challenge, meter_pub, eph.public, sid)
        keys = derive_session_key(eph.secret, meter_pub, th, key_digest(meter_pub), sid, slot)
        self.__pending[meter] = (keys, th)
        return quote, eph.public, sid

    def confirm_session(self, meter: MeterId, confirmation: bytes) -> None:
        pending = self.__pending.get(meter)
        if pending is None:
            raise UnknownSession(f"no pending handshake for {meter}")
        keys, th = pending
        if not secrets.compare_digest(key_confirmation(keys, th), confirmation):
            raise BadSignature(f"key confirmation from {meter} failed")
        del self.__pending[meter]
        self.__sessions[meter] = _Session(keys)

    # -- data path ------------------------------------------------------------

    def ingest(self, em: EncryptedMeasurement) -> None:
        sess = self.__sessions.get(em.meter)
        if sess is None:
            raise UnknownSession(f"no attested session for {em.meter}")
        v = open_measurement(em, sess.keys, sess.last_seen, self.__v_max, sess.aead)
        self.__agg.check_fresh(em.meter, em.slot)
        sess.last_seen = em.counter
        self.__agg.add(em.meter, em.slot, v)

    def close_slot(self, j: int) -> AggregateRecord:
        return self.__agg.close_slot(j)

    def close_period(self) -> list[BillingRecord]:
        return self.__agg.close_period()

    # -- metadata -------------------------------------------------------------

    def _pack_meter_state(self, m: MeterId) -> bytes:
        # history is packed at full window width so the size is the steady-state one
        agg = self.__agg
        sess = self.__sessions.get(m)
        key = sess.keys.channel_key if sess else bytes(16)
        sid = sess.keys.session_id if sess else bytes(4)
        seen = sess.last_seen if sess else 0
        hist = list(agg.history[m]) + [0] * (self.__policy.window - len(agg.history[m]))
        return (m.to_bytes()
                + struct.pack(">16s4sQQIB", key, sid, seen, agg.billing[m], agg.last_slot[m],
                              len(agg.history[m]))
                + struct.pack(f">{len(hist)}Q", *hist))

    def footprint_bytes(self) -> int:
        """Largest packed per-meter state: meter id, channel key, session id,
        replay counter, billing accumulator, last reported slot and the
        history window."""
        return max(len(self._pack_meter_state(m)) for m in self.__agg.roster)


def challenge_message(challenge: bytes, meter_pub: bytes) -> bytes:
    return b"meteragg-challenge" + challenge + meter_pub


def measurement_of(enclave: Enclave) -> EnclaveMeasurement:
    return enclave.measurement
