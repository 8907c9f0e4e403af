"""AES-128-GCM sealing of per-slot readings.

Wire layout (byte-exact)::

    meter id | slot (4, BE) | nonce (12) = session id (4) | counter (8, BE) |
    ciphertext (8) | tag (16)

The plaintext is the reading as an 8-byte big-endian integer; the associated
data is ``meter id bytes || slot (4, BE)``.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .attestation import SessionKeys
from .errors import CounterExhausted, Replay, TagMismatch
from .model import DEFAULT_V_MAX, MeterId, TimeSlot, validate_measurement

COUNTER_MAX = 2**64 - 1
TAG_BYTES = 16
PLAINTEXT_BYTES = 8


def encode_value(v: int) -> bytes:
    return v.to_bytes(PLAINTEXT_BYTES, "big")


def associated_data(meter: MeterId, slot: int) -> bytes:
    return meter.to_bytes() + slot.to_bytes(4, "big")


@dataclass(frozen=True)
class EncryptedMeasurement:
    meter: MeterId
    slot: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def __post_init__(self):
        if len(self.nonce) != 12 or len(self.ciphertext) != 8 or len(self.tag) != 16:
            raise ValueError("malformed encrypted measurement")

    @property
    def session_id(self) -> bytes:
        return self.nonce[:4]

    @property
    def counter(self) -> int:
        return int.from_bytes(self.nonce[4:], "big")

    def to_bytes(self) -> bytes:
        return (self.meter.to_bytes() + self.slot.to_bytes(4, "big") + self.nonce
                + self.ciphertext + self.tag)

    @classmethod
    def from_bytes(cls, data: bytes) -> EncryptedMeasurement:
        meter, off = MeterId.from_bytes(data)
        if len(data) != off + 4 + 12 + 8 + 16:
            raise ValueError("encrypted measurement has wrong length")
        slot = int.from_bytes(data[off:off + 4], "big")
        off += 4
        return cls(meter, slot, data[off:off + 12], data[off + 12:off + 20], data[off + 20:])


class NonceCounter:
    """Per-session nonce counter; a session whose counter runs out is dead."""

    def __init__(self, session_id: bytes, start: int = 1):
        if len(session_id) != 4:
            raise ValueError("session id is 4 bytes")
        self.session_id = session_id
        self.next_value = start
        self.terminated = False

    def take(self) -> bytes:
        if self.terminated or self.next_value > COUNTER_MAX:
            self.terminated = True
            raise CounterExhausted(f"session {self.session_id.hex()} exhausted its nonces")
        nonce = self.session_id + self.next_value.to_bytes(8, "big")
        self.next_value += 1
        return nonce


def seal_measurement(v: int, slot: TimeSlot | int, keys: SessionKeys, ctr: NonceCounter,
                     meter: MeterId, v_max: int = DEFAULT_V_MAX,
                     aead: AESGCM | None = None) -> EncryptedMeasurement:
    validate_measurement(v, v_max)
    j = slot.j if isinstance(slot, TimeSlot) else slot
    nonce = ctr.take()
    aead = aead or AESGCM(keys.channel_key)
    sealed = aead.encrypt(nonce, encode_value(v), associated_data(meter, j))
    return EncryptedMeasurement(meter, j, nonce, sealed[:PLAINTEXT_BYTES], sealed[PLAINTEXT_BYTES:])


def open_measurement(em: EncryptedMeasurement, keys: SessionKeys, last_seen: int,
                     v_max: int = DEFAULT_V_MAX, aead: AESGCM | None = None) -> int:
    """Decrypt and authenticate; the caller advances ``last_seen`` to
    ``em.counter`` on success."""
    aead = aead or AESGCM(keys.channel_key)
    try:
        pt = aead.decrypt(em.nonce, em.ciphertext + em.tag, associated_data(em.meter, em.slot))
    except InvalidTag as exc:
        raise TagMismatch(f"authentication failed for {em.meter} slot {em.slot}") from exc
    if em.counter <= last_seen:
        raise Replay(f"counter {em.counter} <= last seen {last_seen} for {em.meter}")
    return validate_measurement(int.from_bytes(pt, "big"), v_max)
