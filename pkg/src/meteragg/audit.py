"""Privacy-boundary audit over a recorded bus transcript.

Checks that no per-slot, per-meter reading crosses the bus in the clear and
that the enclave's releases are exactly the regional slot sums and the
end-of-period billing totals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .bus import Envelope, Kind
from .channel import EncryptedMeasurement, encode_value
from .model import MeterId

SETUP_KINDS = {Kind.IDENTIFY, Kind.CRED_OK, Kind.CHALLENGE, Kind.QUOTE, Kind.ATTEST_OK,
               Kind.CONFIG_REQ, Kind.PUBKEY, Kind.ROSTER}


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    billing: list[dict] = field(default_factory=list)
    released_integers: set[int] = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return not self.violations


def _json_ints(obj) -> set[int]:
    if isinstance(obj, bool):
        return set()
    if isinstance(obj, int):
        return {obj}
    if isinstance(obj, dict):
        # "meter" is an identity, not a reading
        return set().union(set(), *(_json_ints(v) for k, v in obj.items() if k != "meter"))
    if isinstance(obj, list):
        return set().union(set(), *(_json_ints(v) for v in obj))
    return set()


def audit_transcript(transcripts: Mapping[str, list[Envelope]],
                     readings: Mapping[MeterId, Mapping[int, int]],
                     enclave_sender: str) -> AuditReport:
    """``readings[meter][slot]`` holds every real value a meter sent."""
    rep = AuditReport()
    by_slot: dict[int, set[int]] = {}
    for row in readings.values():
        for j, v in row.items():
            by_slot.setdefault(j, set()).add(v)

    for topic, envs in transcripts.items():
        for env in envs:
            where = f"{topic}#{env.sender}:{env.seq}"
            if env.sender == enclave_sender:
                _enclave_output(env, where, rep)
                continue
            if env.kind is Kind.MEASUREMENT:
                try:
                    em = EncryptedMeasurement.from_bytes(env.payload)
                except ValueError:
                    rep.violations.append(f"{where}: unparseable measurement")
                    continue
                v = readings.get(em.meter, {}).get(em.slot)
                if v is not None and em.ciphertext == encode_value(v):
                    rep.violations.append(f"{where}: ciphertext equals plaintext reading")
                continue
            if env.slot is None:
                if env.kind not in SETUP_KINDS:
                    rep.violations.append(f"{where}: slotless {env.kind.value} message")
                continue
            if env.kind is Kind.AGGREGATE:
                rep.violations.append(f"{where}: aggregate released outside the enclave")
                continue
            values = by_slot.get(env.slot, set())
            try:
                leaked = _json_ints(json.loads(env.payload)) & values
            except (ValueError, UnicodeDecodeError):
                leaked = {v for v in values if encode_value(v) in env.payload}
            if leaked:
                rep.violations.append(f"{where}: {env.kind.value} carries reading(s) {sorted(leaked)}")
    return rep


def _enclave_output(env: Envelope, where: str, rep: AuditReport) -> None:
    if env.kind not in (Kind.AGGREGATE, Kind.BILLING):
        rep.violations.append(f"{where}: enclave emitted {env.kind.value}")
        return
    obj = json.loads(env.payload)
    if env.kind is Kind.AGGREGATE:
        rep.aggregates.append(obj)
        if obj["sum"] is not None:
            rep.released_integers.add(obj["sum"])
    else:
        rep.billing.append(obj)
        rep.released_integers.add(obj["total"])
