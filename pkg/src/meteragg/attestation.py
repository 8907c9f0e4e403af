"""Meter identification, enclave quotes and quote-bound session keys.

The attestation authority signs quotes with an ordinary Ed25519 key. It
models code-identity and key binding only; EPID group-signature anonymity is
not modelled.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import secrets
from dataclasses import dataclass
from enum import Enum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .bus import Kind
from .errors import (
    BadSignature,
    DigestMismatch,
    HandshakeOrderError,
    Revoked,
    StaleChallenge,
    WrongMeasurement,
)
from .group import MODP_2048_P, GroupParams, powmod
from .model import MeterId

CHALLENGE_BYTES = 32
DH_GROUP = GroupParams(MODP_2048_P, (MODP_2048_P - 1) // 2, 2)
ENCLAVE_CODE_IDENTITY = "meteragg.enclave/slot-sum+billing/v1"


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text, validate=True)


def derive_seed(seed: int, label: str) -> bytes:
    """32 deterministic bytes for key material named ``label``."""
    return hashlib.sha256(f"meteragg/{seed}/{label}".encode()).digest()


def signing_key(seed_bytes: bytes | None = None) -> Ed25519PrivateKey:
    if seed_bytes is None:
        return Ed25519PrivateKey.generate()
    return Ed25519PrivateKey.from_private_bytes(seed_bytes)


def raw_public(key: Ed25519PrivateKey | Ed25519PublicKey) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _verify(public: bytes, signature: bytes, message: bytes) -> None:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError) as exc:
        raise BadSignature("signature does not verify") from exc


# --- credentials ---------------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    meter: MeterId
    public_key: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return credential_message(self.meter, self.public_key)

    def to_json(self) -> dict:
        return {"region": self.meter.region, "meter": self.meter.index,
                "public_key": b64(self.public_key), "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, obj: dict) -> Credential:
        return cls(MeterId(obj["region"], obj["meter"]), unb64(obj["public_key"]),
                   unb64(obj["signature"]))


def credential_message(meter: MeterId, public_key: bytes) -> bytes:
    return b"meteragg-credential" + meter.to_bytes() + public_key


def issue_credential(provisioning_key: Ed25519PrivateKey, meter: MeterId,
                     public_key: bytes) -> Credential:
    return Credential(meter, public_key,
                      provisioning_key.sign(credential_message(meter, public_key)))


def verify_credential(cred: Credential, provisioning_public: bytes,
                      revoked: frozenset[MeterId] | set[MeterId] = frozenset()) -> MeterId:
    _verify(provisioning_public, cred.signature, cred.signed_bytes())
    if cred.meter in revoked:
        raise Revoked(cred.meter)
    return cred.meter


class UtilityProvider:
    """Holds the provisioning key that signs meter credentials."""

    def __init__(self, key: Ed25519PrivateKey | None = None):
        self._key = key or signing_key()
        self.public_key = raw_public(self._key)
        self.revoked: set[MeterId] = set()

    def provision(self, meter: MeterId, public_key: bytes) -> Credential:
        return issue_credential(self._key, meter, public_key)

    def revoke(self, meter: MeterId) -> None:
        self.revoked.add(meter)

    def verify_credential(self, cred: Credential) -> MeterId:
        return verify_credential(cred, self.public_key, self.revoked)


# --- measurement and quotes ---------------------------------------------------

@dataclass(frozen=True)
class EnclaveMeasurement:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("measurement digest must be 32 bytes")


def compute_measurement(code_identity: str, policy) -> EnclaveMeasurement:
    """Digest over the code identity string and the canonical policy encoding."""
    h = hashlib.sha256()
    h.update(code_identity.encode())
    h.update(b"\x00")
    h.update(policy.canonical())
    return EnclaveMeasurement(h.digest())


def key_digest(public: bytes) -> bytes:
    return hashlib.sha256(public).digest()


@dataclass(frozen=True)
class Quote:
    measurement: EnclaveMeasurement
    report_data: bytes
    signature: bytes

    def __post_init__(self):
        if len(self.report_data) != 64:
            raise ValueError("report_data must be 64 bytes")

    def signed_bytes(self) -> bytes:
        return self.measurement.digest + self.report_data

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        if len(data) != 32 + 64 + 64:
            raise ValueError("quote must be 160 bytes")
        return cls(EnclaveMeasurement(data[:32]), data[32:96], data[96:])

    def to_json(self) -> dict:
        return {"measurement": b64(self.measurement.digest),
                "report_data": b64(self.report_data), "signature": b64(self.signature)}

    @classmethod
    def from_json(cls, obj: dict) -> Quote:
        return cls(EnclaveMeasurement(unb64(obj["measurement"])), unb64(obj["report_data"]),
                   unb64(obj["signature"]))


class AttestationAuthority:
    """Mock attestation authority: signs quotes for provisioned platforms and
    offers verification as a service."""

    def __init__(self, key: Ed25519PrivateKey | None = None):
        self._key = key or signing_key()
        self.public_key = raw_public(self._key)

    def sign_report(self, measurement: EnclaveMeasurement, report_data: bytes) -> bytes:
        return self._key.sign(measurement.digest + report_data)

    def verify(self, quote: Quote, expected: EnclaveMeasurement, challenge: bytes) -> bytes:
        return verify_quote(quote, expected, challenge, self.public_key)


def issue_quote(authority: AttestationAuthority, measurement: EnclaveMeasurement,
                challenge: bytes, enclave_pub: bytes) -> Quote:
    if len(challenge) != CHALLENGE_BYTES:
        raise ValueError("challenge must be 32 bytes")
    report_data = challenge + key_digest(enclave_pub)
    return Quote(measurement, report_data, authority.sign_report(measurement, report_data))


def verify_quote(quote: Quote, expected: EnclaveMeasurement, challenge: bytes,
                 authority_public: bytes) -> bytes:
    """Check signature, code identity and freshness; return the bound key digest."""
    _verify(authority_public, quote.signature, quote.signed_bytes())
    if not hmac.compare_digest(quote.measurement.digest, expected.digest):
        raise WrongMeasurement("quote measurement differs from the expected enclave")
    if not hmac.compare_digest(quote.report_data[:CHALLENGE_BYTES], challenge):
        raise StaleChallenge("quote does not answer the outstanding challenge")
    return quote.report_data[CHALLENGE_BYTES:]


# --- key agreement -------------------------------------------------------------

@dataclass(frozen=True)
class SessionKeys:
    channel_key: bytes
    session_id: bytes
    established_at: int = 0

    def __post_init__(self):
        if len(self.channel_key) != 16 or len(self.session_id) != 4:
            raise ValueError("channel key is 16 bytes, session id 4 bytes")


class EphemeralKey:
    """Diffie-Hellman key pair in the prime-order subgroup of ``DH_GROUP``."""

    def __init__(self, group: GroupParams = DH_GROUP, rng=None):
        rng = rng or secrets.SystemRandom()
        self.group = group
        self.secret = rng.randrange(1, group.q)
        self.public = group.encode(group.exp(self.secret))


def transcript_hash(meter: MeterId, challenge: bytes, meter_pub: bytes,
                    enclave_pub: bytes, session_id: bytes) -> bytes:
    h = hashlib.sha256(b"meteragg-attest-v1")
    for part in (meter.to_bytes(), challenge, meter_pub, enclave_pub, session_id):
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


def derive_session_key(local_secret: int, remote_public: bytes, th: bytes,
                       bound_digest: bytes, session_id: bytes,
                       established_at: int = 0, group: GroupParams = DH_GROUP) -> SessionKeys:
    """Channel key = SHA-256(shared secret || transcript hash)[:16].

    ``bound_digest`` is the digest the peer's key was bound to (the quote's
    report_data for the enclave key, the signed challenge for the meter key).
    """
    if not hmac.compare_digest(key_digest(remote_public), bound_digest):
        raise DigestMismatch("remote key is not the one bound during attestation")
    remote = group.check_member(int.from_bytes(remote_public, "big"), "remote DH key")
    shared = group.encode(powmod(remote, local_secret, group.p))
    key = hashlib.sha256(shared + th).digest()[:16]
    return SessionKeys(key, session_id, established_at)


def key_confirmation(keys: SessionKeys, th: bytes) -> bytes:
    return hmac.new(keys.channel_key, b"attest-ok" + th, hashlib.sha256).digest()


# --- handshake state machine ------------------------------------------------------

class HandshakeState(str, Enum):
    IDENTIFY = "Identify"
    CREDENTIAL_VERIFIED = "CredentialVerified"
    CHALLENGED = "Challenged"
    QUOTE_VERIFIED = "QuoteVerified"
    KEYS_ESTABLISHED = "KeysEstablished"


HANDSHAKE_KINDS = (Kind.IDENTIFY, Kind.CRED_OK, Kind.CHALLENGE, Kind.QUOTE, Kind.ATTEST_OK)

# IDENTIFY may be repeated while identification is pending.
TRANSITIONS: dict[tuple[HandshakeState, Kind], HandshakeState] = {
    (HandshakeState.IDENTIFY, Kind.IDENTIFY): HandshakeState.IDENTIFY,
    (HandshakeState.IDENTIFY, Kind.CRED_OK): HandshakeState.CREDENTIAL_VERIFIED,
    (HandshakeState.CREDENTIAL_VERIFIED, Kind.CHALLENGE): HandshakeState.CHALLENGED,
    (HandshakeState.CHALLENGED, Kind.QUOTE): HandshakeState.QUOTE_VERIFIED,
    (HandshakeState.QUOTE_VERIFIED, Kind.ATTEST_OK): HandshakeState.KEYS_ESTABLISHED,
}


class Handshake:
    """Per-meter handshake progress. Both parties keep one and feed it every
    handshake message they send or receive, in order."""

    def __init__(self, meter: MeterId):
        self.meter = meter
        self.state = HandshakeState.IDENTIFY

    def check(self, kind: Kind) -> HandshakeState:
        nxt = TRANSITIONS.get((self.state, kind))
        if nxt is None:
            raise HandshakeOrderError(self.state.value, Kind(kind).value)
        return nxt

    def apply(self, kind: Kind) -> HandshakeState:
        self.state = self.check(kind)
        return self.state

    @property
    def established(self) -> bool:
        return self.state is HandshakeState.KEYS_ESTABLISHED
