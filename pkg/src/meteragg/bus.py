"""In-process topic bus with per-sender FIFO delivery and transcript recording.

The transport stands in for a Kafka deployment. Delivery is exactly-once and
synchronous: ``publish`` appends the envelope to every current subscriber's
queue before returning. A meter "fails" only by not publishing.
"""

from __future__ import annotations

import base64
import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

from .errors import RecordingDisabled, SequenceError, TopicMismatch


class Kind(str, Enum):
    # attestation handshake
    IDENTIFY = "IDENTIFY"
    CRED_OK = "CRED_OK"
    CHALLENGE = "CHALLENGE"
    QUOTE = "QUOTE"
    ATTEST_OK = "ATTEST_OK"
    # data path
    MEASUREMENT = "MEASUREMENT"
    PLAIN = "PLAIN"
    AGGREGATE = "AGGREGATE"
    BILLING = "BILLING"
    # homomorphic round
    CONFIG_REQ = "CONFIG_REQ"
    PUBKEY = "PUBKEY"
    ROSTER = "ROSTER"
    CT = "CT"
    COMBINED = "COMBINED"
    PARTIAL = "PARTIAL"
    SUM = "SUM"


def validate_topic(name: str) -> str:
    if not name or any(ch.isspace() for ch in name):
        raise ValueError(f"invalid topic name {name!r}")
    return name


def measurements_topic(region: str) -> str:
    return f"region/{region}/measurements"


def attestation_topic(region: str) -> str:
    return f"region/{region}/attestation"


def homomorphic_topic(region: str) -> str:
    return f"region/{region}/homomorphic"


AGGREGATES_TOPIC = "utility/aggregates"


@dataclass(frozen=True)
class Envelope:
    topic: str
    sender: str
    kind: Kind
    slot: int | None
    payload: bytes
    seq: int

    def to_json(self) -> dict:
        return {
            "topic": self.topic,
            "sender": self.sender,
            "kind": self.kind.value,
            "slot": self.slot,
            "payload": base64.b64encode(self.payload).decode("ascii"),
            "seq": self.seq,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Envelope:
        return cls(obj["topic"], obj["sender"], Kind(obj["kind"]), obj["slot"],
                   base64.b64decode(obj["payload"]), obj["seq"])


class Subscription:
    """Ordered stream of envelopes published after ``subscribe``."""

    def __init__(self, topic: str):
        self.topic = topic
        self._queue: deque[Envelope] = deque()
        self._lock = threading.Lock()

    def _push(self, env: Envelope) -> None:
        with self._lock:
            self._queue.append(env)

    def poll(self) -> Envelope | None:
        with self._lock:
            return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Envelope]:
        with self._lock:
            out = list(self._queue)
            self._queue.clear()
        return out

    def __iter__(self) -> Iterator[Envelope]:
        while (env := self.poll()) is not None:
            yield env

    def __len__(self):
        return len(self._queue)


class Bus:
    def __init__(self, record: bool | set[str] = False):
        self._lock = threading.Lock()
        self._subs: dict[str, list[Subscription]] = defaultdict(list)
        self._last_seq: dict[tuple[str, str], int] = {}
        self._record_all = record is True
        self._recorded: set[str] = set(record) if isinstance(record, (set, frozenset)) else set()
        self._transcripts: dict[str, list[Envelope]] = defaultdict(list)
        self._endpoints: dict[str, Endpoint] = {}

    def endpoint(self, name: str) -> Endpoint:
        """The single sender handle for identity ``name``."""
        with self._lock:
            if name not in self._endpoints:
                self._endpoints[name] = Endpoint(self, name)
            return self._endpoints[name]

    def enable_recording(self, topic: str) -> None:
        with self._lock:
            self._recorded.add(validate_topic(topic))

    def _recording(self, topic: str) -> bool:
        return self._record_all or topic in self._recorded

    def subscribe(self, topic: str) -> Subscription:
        sub = Subscription(validate_topic(topic))
        with self._lock:
            self._subs[topic].append(sub)
        return sub

    def publish(self, topic: str, env: Envelope) -> int:
        """Deliver ``env`` to every subscriber of ``topic``; returns the
        number of subscribers reached."""
        if env.topic != topic:
            raise TopicMismatch(f"envelope for {env.topic!r} published on {topic!r}")
        validate_topic(topic)
        with self._lock:
            key = (env.sender, topic)
            last = self._last_seq.get(key)
            if last is not None and env.seq <= last:
                raise SequenceError(f"{env.sender} seq {env.seq} after {last} on {topic}")
            self._last_seq[key] = env.seq
            if self._recording(topic):
                self._transcripts[topic].append(env)
            subs = list(self._subs.get(topic, ()))
            # Delivery under the bus lock keeps every subscriber's view identical.
            for sub in subs:
                sub._push(env)
        return len(subs)

    def transcript(self, topic: str) -> list[Envelope]:
        with self._lock:
            if not self._recording(topic):
                raise RecordingDisabled(f"recording is off for {topic}")
            return list(self._transcripts.get(topic, ()))

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(set(self._subs) | set(self._transcripts))

    def full_transcript(self) -> dict[str, list[Envelope]]:
        with self._lock:
            return {t: list(envs) for t, envs in self._transcripts.items()}


class Endpoint:
    """A named sender; stamps envelopes with a per-topic monotone ``seq``."""

    def __init__(self, bus: Bus, name: str):
        self.bus = bus
        self.name = name
        self._seq: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def send(self, topic: str, kind: Kind, payload: bytes, slot: int | None = None) -> Envelope:
        with self._lock:
            self._seq[topic] += 1
            env = Envelope(topic, self.name, kind, slot, payload, self._seq[topic])
            self.bus.publish(topic, env)
        return env

    def send_json(self, topic: str, kind: Kind, obj, slot: int | None = None) -> Envelope:
        return self.send(topic, kind, json.dumps(obj, sort_keys=True).encode(), slot)


def dump_transcript(envs: list[Envelope]) -> str:
    return json.dumps([e.to_json() for e in envs], indent=1)


def load_transcript(text: str) -> list[Envelope]:
    return [Envelope.from_json(o) for o in json.loads(text)]
