"""The three aggregation backends wired over the bus.

* ``plain``: meters publish readings in the clear (insecure baseline).
* ``enclave``: meters attest the enclave, then send AES-GCM sealed readings.
* ``homomorphic``: masked ElGamal secure sum; no fault tolerance.

Every backend exposes ``setup``, ``run_slot`` and ``close_period`` and
publishes its releases on ``utility/aggregates``.
"""

from __future__ import annotations

import json
import logging
import secrets
import time
from dataclasses import dataclass, field
from typing import Mapping

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .attestation import (
    CHALLENGE_BYTES,
    Credential,
    EphemeralKey,
    Handshake,
    Quote,
    SessionKeys,
    b64,
    derive_session_key,
    key_confirmation,
    transcript_hash,
    unb64,
    verify_quote,
)
from .bus import (
    AGGREGATES_TOPIC,
    Bus,
    Endpoint,
    Envelope,
    Kind,
    attestation_topic,
    homomorphic_topic,
    measurements_topic,
)
from .channel import EncryptedMeasurement, NonceCounter, seal_measurement
from .enclave import Enclave, SlotAggregator, SubstitutionPolicy, challenge_message
from .errors import MeterAggError, ProtocolAbort
from .homomorphic import HomAggregator, Producer, config_phase, pump
from .keys import KeyMaterial
from .model import DEFAULT_V_MAX, AggregateRecord, BillingRecord, MeterId

log = logging.getLogger(__name__)

BACKENDS = ("plain", "enclave", "homomorphic")


def enclave_sender(region: str) -> str:
    return f"enclave/{region}"


@dataclass
class SlotResult:
    record: AggregateRecord
    latency_ms: float
    errors: list[str] = field(default_factory=list)


def _publish_record(ep: Endpoint, region: str, rec: AggregateRecord) -> None:
    ep.send_json(AGGREGATES_TOPIC, Kind.AGGREGATE, {"region": region, **rec.to_json()}, rec.slot)


def _publish_billing(ep: Endpoint, records: list[BillingRecord]) -> None:
    for b in records:
        ep.send_json(AGGREGATES_TOPIC, Kind.BILLING, b.to_json())


# --- plain -----------------------------------------------------------------------

class PlainBackend:
    name = "plain"

    def __init__(self, region: str, meters: list[MeterId], policy: SubstitutionPolicy, t: int,
                 bus: Bus, v_max: int = DEFAULT_V_MAX):
        self.region = region
        self.meters = meters
        self.bus = bus
        self.topic = measurements_topic(region)
        self.agg = SlotAggregator(meters, policy, t)
        self.endpoints = {m: bus.endpoint(f"meter/{region}/{m.index}") for m in meters}
        self.out = bus.endpoint(f"plain-aggregator/{region}")
        self.inbox = bus.subscribe(self.topic)

    def setup(self) -> None:
        pass

    def run_slot(self, j: int, readings: Mapping[MeterId, int]) -> SlotResult:
        errors = []
        start = time.perf_counter()
        for m, v in readings.items():
            self.endpoints[m].send_json(self.topic, Kind.PLAIN, {"meter": m.index, "wh": v}, j)
        for env in self.inbox:
            if env.kind is not Kind.PLAIN:
                continue
            obj = json.loads(env.payload)
            try:
                self.agg.add(MeterId(self.region, obj["meter"]), env.slot, obj["wh"])
            except MeterAggError as exc:
                errors.append(f"plain ingest: {exc}")
        rec = self.agg.close_slot(j)
        _publish_record(self.out, self.region, rec)
        return SlotResult(rec, (time.perf_counter() - start) * 1e3, errors)

    def close_period(self) -> list[BillingRecord]:
        records = self.agg.close_period()
        _publish_billing(self.out, records)
        return records


# --- enclave ------------------------------------------------------------------------

class SmartMeter:
    """Meter side of the attestation handshake and the sealed data path."""

    def __init__(self, meter: MeterId, keys: KeyMaterial, expected_measurement, bus: Bus,
                 verifier=None, rng=None, v_max: int = DEFAULT_V_MAX):
        self.meter = meter
        self.cred = keys.credential(meter)
        self._sign = keys.meter_key(meter)
        self.authority_public = keys.authority.public_key
        self.expected = expected_measurement
        self.verifier = verifier
        self.rng = rng or secrets.SystemRandom()
        self.v_max = v_max
        self.handshake = Handshake(meter)
        self.att_topic = attestation_topic(meter.region)
        self.data_topic = measurements_topic(meter.region)
        self.endpoint = bus.endpoint(f"meter/{meter.region}/{meter.index}")
        self.inbox = bus.subscribe(self.att_topic)
        self._challenge: bytes | None = None
        self._eph: EphemeralKey | None = None
        self.keys: SessionKeys | None = None
        self._counter: NonceCounter | None = None
        self._aead: AESGCM | None = None

    def _send(self, kind: Kind, obj: dict) -> None:
        self.handshake.check(kind)
        self.endpoint.send_json(self.att_topic, kind, {"meter": self.meter.index, **obj})
        self.handshake.apply(kind)

    def start(self) -> None:
        self._send(Kind.IDENTIFY, {"credential": self.cred.to_json()})

    def process(self) -> int:
        handled = 0
        for env in self.inbox:
            if env.kind not in (Kind.CRED_OK, Kind.QUOTE):
                continue
            obj = json.loads(env.payload)
            if obj.get("meter") != self.meter.index:
                continue
            state = self.handshake.state
            try:
                self.handshake.check(env.kind)
                if env.kind is Kind.CRED_OK:
                    self._on_cred_ok()
                else:
                    self._on_quote(obj)
            except MeterAggError as exc:
                raise ProtocolAbort(
                    f"meter {self.meter}: {state.value} --{env.kind.value}--> failed: {exc}") from exc
            handled += 1
        return handled

    def _on_cred_ok(self) -> None:
        self.handshake.apply(Kind.CRED_OK)
        # a fresh challenge invalidates any earlier one
        self._challenge = self.rng.randbytes(CHALLENGE_BYTES)
        self._eph = EphemeralKey(rng=self.rng)
        sig = self._sign.sign(challenge_message(self._challenge, self._eph.public))
        self._send(Kind.CHALLENGE, {"challenge": b64(self._challenge),
                                    "meter_pub": b64(self._eph.public), "signature": b64(sig)})

    def _on_quote(self, obj: dict) -> None:
        quote = Quote.from_bytes(unb64(obj["quote"]))
        enclave_pub = unb64(obj["enclave_pub"])
        sid = unb64(obj["session_id"])
        if self.verifier is not None:
            bound = self.verifier.verify(quote, self.expected, self._challenge)
        else:
            bound = verify_quote(quote, self.expected, self._challenge, self.authority_public)
        th = transcript_hash(self.meter, self._challenge, self._eph.public, enclave_pub, sid)
        keys = derive_session_key(self._eph.secret, enclave_pub, th, bound, sid)
        self.handshake.apply(Kind.QUOTE)
        self.keys = keys
        self._counter = NonceCounter(sid)
        self._aead = AESGCM(keys.channel_key)
        self._challenge = None
        self._eph = None
        self._send(Kind.ATTEST_OK, {"confirm": b64(key_confirmation(keys, th))})

    def seal(self, v: int, j: int) -> EncryptedMeasurement:
        if not self.handshake.established:
            raise ProtocolAbort(f"meter {self.meter}: no channel in state {self.handshake.state.value}")
        return seal_measurement(v, j, self.keys, self._counter, self.meter, self.v_max, self._aead)

    def report(self, v: int, j: int) -> Envelope:
        em = self.seal(v, j)
        return self.endpoint.send(self.data_topic, Kind.MEASUREMENT, em.to_bytes(), j)


class AggregatorHost:
    """Untrusted host: relays handshake traffic to the utility and enclave,
    feeds ciphertexts to the enclave and forwards its releases."""

    def __init__(self, region: str, enclave: Enclave, utility, bus: Bus):
        self.region = region
        self.enclave = enclave
        self.utility = utility
        self.att_topic = attestation_topic(region)
        self.endpoint = bus.endpoint(f"aggregator/{region}")
        self.enclave_out = bus.endpoint(enclave_sender(region))
        self.att_inbox = bus.subscribe(self.att_topic)
        self.data_inbox = bus.subscribe(measurements_topic(region))
        self.handshakes: dict[MeterId, Handshake] = {}
        self._creds = {}

    def _reply(self, hs: Handshake, kind: Kind, obj: dict) -> None:
        hs.check(kind)
        self.endpoint.send_json(self.att_topic, kind, {"meter": hs.meter.index, **obj})
        hs.apply(kind)

    def process(self) -> int:
        handled = 0
        for env in self.att_inbox:
            if env.kind not in (Kind.IDENTIFY, Kind.CHALLENGE, Kind.ATTEST_OK):
                continue
            obj = json.loads(env.payload)
            meter = MeterId(self.region, obj["meter"])
            hs = self.handshakes.setdefault(meter, Handshake(meter))
            state = hs.state
            try:
                hs.check(env.kind)
                getattr(self, f"_on_{env.kind.value.lower()}")(hs, obj)
            except MeterAggError as exc:
                raise ProtocolAbort(
                    f"aggregator for {meter}: {state.value} --{env.kind.value}--> failed: {exc}"
                ) from exc
            handled += 1
        return handled

    def _on_identify(self, hs: Handshake, obj: dict) -> None:
        cred = Credential.from_json(obj["credential"])
        if cred.meter != hs.meter:
            raise ProtocolAbort(f"credential names {cred.meter}, sender claims {hs.meter}")
        self.utility.verify_credential(cred)
        hs.apply(Kind.IDENTIFY)
        self._creds[hs.meter] = cred
        self._reply(hs, Kind.CRED_OK, {})

    def _on_challenge(self, hs: Handshake, obj: dict) -> None:
        quote, enclave_pub, sid = self.enclave.accept_challenge(
            self._creds[hs.meter], unb64(obj["challenge"]), unb64(obj["meter_pub"]),
            unb64(obj["signature"]))
        hs.apply(Kind.CHALLENGE)
        self._reply(hs, Kind.QUOTE, {"quote": b64(quote.to_bytes()),
                                     "enclave_pub": b64(enclave_pub), "session_id": b64(sid)})

    def _on_attest_ok(self, hs: Handshake, obj: dict) -> None:
        self.enclave.confirm_session(hs.meter, unb64(obj["confirm"]))
        hs.apply(Kind.ATTEST_OK)

    def relay_measurements(self) -> list[str]:
        errors = []
        for env in self.data_inbox:
            if env.kind is not Kind.MEASUREMENT:
                continue
            try:
                self.enclave.ingest(EncryptedMeasurement.from_bytes(env.payload))
            except (MeterAggError, ValueError) as exc:
                errors.append(f"enclave ingest from {env.sender}: {type(exc).__name__}: {exc}")
        return errors

    def release_slot(self, j: int) -> AggregateRecord:
        rec = self.enclave.close_slot(j)
        _publish_record(self.enclave_out, self.region, rec)
        return rec

    def release_period(self) -> list[BillingRecord]:
        records = self.enclave.close_period()
        _publish_billing(self.enclave_out, records)
        return records


class EnclaveBackend:
    name = "enclave"

    def __init__(self, region: str, meters: list[MeterId], policy: SubstitutionPolicy, t: int,
                 bus: Bus, keys: KeyMaterial, v_max: int = DEFAULT_V_MAX,
                 quote_verifier: str = "meter", rng=None):
        self.region = region
        self.meters = meters
        self.bus = bus
        self.enclave = Enclave(meters, policy, t, keys.authority, keys.utility.public_key,
                               v_max=v_max, rng=rng)
        self.host = AggregatorHost(region, self.enclave, keys.utility, bus)
        verifier = keys.authority if quote_verifier == "service" else None
        expected = self.enclave.measurement
        self.smart_meters = {m: SmartMeter(m, keys, expected, bus, verifier, rng, v_max)
                             for m in meters}

    def setup(self) -> None:
        """Run the attestation handshake for every meter."""
        for sm in self.smart_meters.values():
            sm.start()
        pump(self.host, *self.smart_meters.values())
        stuck = [str(m) for m, sm in self.smart_meters.items() if not sm.handshake.established]
        if stuck:
            raise ProtocolAbort(f"handshake incomplete for {', '.join(stuck)}")

    def run_slot(self, j: int, readings: Mapping[MeterId, int]) -> SlotResult:
        start = time.perf_counter()
        for m, v in readings.items():
            self.smart_meters[m].report(v, j)
        errors = self.host.relay_measurements()
        rec = self.host.release_slot(j)
        return SlotResult(rec, (time.perf_counter() - start) * 1e3, errors)

    def close_period(self) -> list[BillingRecord]:
        return self.host.release_period()

    def footprint_bytes(self) -> int:
        return self.enclave.footprint_bytes()


# --- homomorphic --------------------------------------------------------------------------

class HomomorphicBackend:
    name = "homomorphic"

    def __init__(self, region: str, meters: list[MeterId], bus: Bus, keys: KeyMaterial,
                 v_max: int = DEFAULT_V_MAX, rng=None):
        if keys.params is None:
            raise ValueError("homomorphic backend needs group parameters")
        self.region = region
        self.meters = meters
        self.params = keys.params
        topic = homomorphic_topic(region)
        utility_public = keys.utility.public_key
        self.producers = {m: Producer(keys.producer_keys(m), self.params, utility_public, bus,
                                      topic, v_max, rng) for m in meters}
        self.aggregator = HomAggregator(region, meters, self.params, utility_public, bus,
                                        topic, v_max)
        self.apk = None

    def setup(self) -> None:
        try:
            self.apk = config_phase(list(self.producers.values()), self.aggregator)
        except MeterAggError as exc:
            raise ProtocolAbort(f"homomorphic configuration phase failed: {exc}") from exc

    def run_slot(self, j: int, readings: Mapping[MeterId, int]) -> SlotResult:
        errors = []
        start = time.perf_counter()
        for m, v in readings.items():
            self.producers[m].submit(j, v)
        pump(self.aggregator)
        n = len(self.meters)
        got = len(self.aggregator.received(j))
        if got < n:
            # no recovery from silent producers in this scheme
            for m in readings:
                self.producers[m].abandon(j)
            self.aggregator.abandon(j)
            rec = AggregateRecord(j, None, got, 0, True, "incomplete_round")
        else:
            try:
                self.aggregator.combine_round(j)
                pump(*self.producers.values())
                pump(self.aggregator)
                V = self.aggregator.recover_round(j)
                rec = AggregateRecord(j, V, n, 0, False)
            except MeterAggError as exc:
                errors.append(f"homomorphic round {j}: {type(exc).__name__}: {exc}")
                self.aggregator.abandon(j)
                rec = AggregateRecord(j, None, got, 0, True, f"error:{type(exc).__name__}")
        _publish_record(self.aggregator.endpoint, self.region, rec)
        return SlotResult(rec, (time.perf_counter() - start) * 1e3, errors)

    def close_period(self) -> list[BillingRecord]:
        return []
