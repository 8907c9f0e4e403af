"""Exception hierarchy. Every protocol failure derives from ``MeterAggError``."""


class MeterAggError(Exception):
    pass


# model-core
class MissingValue(MeterAggError):
    def __init__(self, meter, slot):
        super().__init__(f"meter {meter} has no value at slot {slot}")
        self.meter = meter
        self.slot = slot


class IncompleteRow(MeterAggError):
    def __init__(self, meter, have, want):
        super().__init__(f"meter {meter} row has {have} of {want} slots")
        self.meter = meter
        self.have = have
        self.want = want


class OutOfRange(MeterAggError):
    def __init__(self, value, v_max):
        super().__init__(f"measurement {value} outside [0, {v_max}]")
        self.value = value
        self.v_max = v_max


class ConfigError(MeterAggError):
    pass


# bus
class TopicMismatch(MeterAggError):
    pass


class RecordingDisabled(MeterAggError):
    pass


class SequenceError(MeterAggError):
    pass


# attestation
class BadSignature(MeterAggError):
    pass


class Revoked(MeterAggError):
    def __init__(self, meter):
        super().__init__(f"meter {meter} is revoked")
        self.meter = meter


class WrongMeasurement(MeterAggError):
    pass


class StaleChallenge(MeterAggError):
    pass


class DigestMismatch(MeterAggError):
    pass


class HandshakeOrderError(MeterAggError):
    def __init__(self, state, kind):
        super().__init__(f"message {kind} not accepted in handshake state {state}")
        self.state = state
        self.kind = kind


# secure channel
class CounterExhausted(MeterAggError):
    pass


class TagMismatch(MeterAggError):
    pass


class Replay(MeterAggError):
    pass


class UnknownSession(MeterAggError):
    pass


# enclave aggregation
class DuplicateSlot(MeterAggError):
    def __init__(self, meter, slot):
        super().__init__(f"meter {meter} already reported slot {slot}")
        self.meter = meter
        self.slot = slot


class SlotAlreadyClosed(MeterAggError):
    pass


class PeriodIncomplete(MeterAggError):
    def __init__(self, closed, t):
        super().__init__(f"only {closed} of {t} slots closed")
        self.closed = closed
        self.t = t


# homomorphic aggregation
class InvalidGroup(MeterAggError):
    pass


class PrimalitySearchExhausted(MeterAggError):
    pass


class NotInSubgroup(MeterAggError):
    pass


class BadCredential(MeterAggError):
    def __init__(self, meter):
        super().__init__(f"invalid certificate for {meter}")
        self.meter = meter


class RosterMismatch(MeterAggError):
    pass


class EmptyRound(MeterAggError):
    pass


class MissingPartial(MeterAggError):
    def __init__(self, meter):
        super().__init__(f"no partial decryption from {meter}")
        self.meter = meter


class LogNotFound(MeterAggError):
    pass


class MaskReuse(MeterAggError):
    pass


class PeriodNotClosed(MeterAggError):
    pass


class SlotNotOpen(MeterAggError):
    pass


class ProtocolAbort(MeterAggError):
    """A protocol step failed; the message names the party and transition."""
