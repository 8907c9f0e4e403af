"""Ground-truth consumption matrix and the two aggregates a utility may learn.

Values are integer watt-hours. Python integers never overflow, so every sum
here is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, IncompleteRow, MissingValue, OutOfRange

DEFAULT_V_MAX = 5000
DEFAULT_SLOTS_PER_PERIOD = 96
CSV_HEADER = ("meter", "slot", "wh")


@dataclass(frozen=True, order=True)
class MeterId:
    region: str
    index: int

    def __post_init__(self):
        if not self.region or not isinstance(self.region, str):
            raise ConfigError("region must be a nonempty string")
        if not 1 <= self.index <= 0xFFFF:
            raise ConfigError(f"meter index {self.index} outside 1..65535")
        if len(self.region.encode()) > 255:
            raise ConfigError("region name longer than 255 bytes")

    def to_bytes(self) -> bytes:
        """2-byte big-endian index, 1-byte region length, region bytes."""
        region = self.region.encode()
        return self.index.to_bytes(2, "big") + bytes([len(region)]) + region

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[MeterId, int]:
        """Parse a meter id at ``offset``; returns the id and the next offset."""
        if len(buf) < offset + 3:
            raise ValueError("truncated meter id")
        index = int.from_bytes(buf[offset:offset + 2], "big")
        n = buf[offset + 2]
        end = offset + 3 + n
        if len(buf) < end:
            raise ValueError("truncated meter id")
        return cls(buf[offset + 3:end].decode(), index), end

    def __str__(self):
        return f"{self.region}/{self.index}"


@dataclass(frozen=True)
class TimeSlot:
    j: int
    duration: int = 900

    def __post_init__(self):
        if self.j < 1:
            raise ConfigError(f"slot index must be >= 1, got {self.j}")
        if self.duration <= 0:
            raise ConfigError("slot duration must be positive")


def validate_measurement(v: int, v_max: int = DEFAULT_V_MAX) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"measurement must be an int, got {type(v).__name__}")
    if v < 0 or v > v_max:
        raise OutOfRange(v, v_max)
    return v


@dataclass(frozen=True)
class AggregateRecord:
    slot: int
    sum: int | None
    contributing: int
    substituted: int
    flagged: bool
    reason: str | None = None

    def to_json(self) -> dict:
        return {
            "slot": self.slot,
            "sum": self.sum,
            "contributing": self.contributing,
            "substituted": self.substituted,
            "flagged": self.flagged,
            "reason": self.reason,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> AggregateRecord:
        return cls(obj["slot"], obj["sum"], obj["contributing"], obj["substituted"],
                   obj["flagged"], obj.get("reason"))


@dataclass(frozen=True)
class BillingRecord:
    meter: MeterId
    period: int
    total: int

    def to_json(self) -> dict:
        return {"region": self.meter.region, "meter": self.meter.index,
                "period": self.period, "total": self.total}

    @classmethod
    def from_json(cls, obj: Mapping) -> BillingRecord:
        return cls(MeterId(obj["region"], obj["meter"]), obj["period"], obj["total"])


@dataclass
class ConsumptionMatrix:
    """Per-region grid ``e[i][j]``; rows may be shorter than ``t`` while a
    period is in progress."""

    region: str
    t: int = DEFAULT_SLOTS_PER_PERIOD
    v_max: int = DEFAULT_V_MAX
    rows: dict[MeterId, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        rows, self.rows = self.rows, {}
        for meter, values in rows.items():
            for v in values:
                self.append(meter, v)

    @classmethod
    def from_rows(cls, region: str, t: int, rows: Mapping[int, Sequence[int]],
                  v_max: int = DEFAULT_V_MAX) -> ConsumptionMatrix:
        m = cls(region, t, v_max)
        for index, values in rows.items():
            meter = MeterId(region, index)
            m.rows.setdefault(meter, [])
            for v in values:
                m.append(meter, v)
        return m

    @property
    def meters(self) -> list[MeterId]:
        return sorted(self.rows)

    def append(self, meter: MeterId, v: int) -> None:
        if meter.region != self.region:
            raise ConfigError(f"meter {meter} is not in region {self.region}")
        row = self.rows.setdefault(meter, [])
        if len(row) >= self.t:
            raise ConfigError(f"row for {meter} already has t={self.t} values")
        row.append(validate_measurement(v, self.v_max))

    def value(self, meter: MeterId, j: int) -> int:
        row = self.rows.get(meter)
        if row is None or not 1 <= j <= len(row):
            raise MissingValue(meter, j)
        return row[j - 1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for meter in self.meters:
                for j, v in enumerate(self.rows[meter], start=1):
                    w.writerow((meter.index, j, v))

    @classmethod
    def from_csv(cls, path: str | Path, region: str, t: int,
                 v_max: int = DEFAULT_V_MAX) -> ConsumptionMatrix:
        cells: dict[int, dict[int, int]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise ConfigError(f"expected CSV header {','.join(CSV_HEADER)}")
            for rec in reader:
                if not rec:
                    continue
                index, j, wh = (int(x) for x in rec)
                row = cells.setdefault(index, {})
                if j in row:
                    raise ConfigError(f"duplicate cell meter={index} slot={j}")
                row[j] = wh
        rows = {}
        for index, row in cells.items():
            if sorted(row) != list(range(1, len(row) + 1)):
                raise ConfigError(f"meter {index} has non-contiguous slots")
            rows[index] = [row[j] for j in range(1, len(row) + 1)]
        return cls.from_rows(region, t, rows, v_max)


def _slot_index(j: TimeSlot | int) -> int:
    return j.j if isinstance(j, TimeSlot) else j


def slot_aggregate(matrix: ConsumptionMatrix, j: TimeSlot | int) -> int:
    """Regional sum over all meters at slot ``j``."""
    j = _slot_index(j)
    total = 0
    for meter in matrix.meters:
        total += matrix.value(meter, j)
    return total


def billing_total(matrix: ConsumptionMatrix, meter: MeterId, period: int = 1) -> BillingRecord:
    row = matrix.rows.get(meter, [])
    if len(row) != matrix.t:
        raise IncompleteRow(meter, len(row), matrix.t)
    return BillingRecord(meter, period, sum(row))


def check_capacity(n: int, v_max: int, t: int, limit: int | None = None) -> int:
    """Largest possible grand total ``n * v_max * t``.

    With a finite accumulator ``limit`` (e.g. a group order) the bound must fit
    or this raises, so sums can never wrap silently.
    """
    worst = n * v_max * t
    if limit is not None and worst >= limit:
        raise OverflowError(f"n*v_max*t = {worst} does not fit below {limit}")
    return worst


def matrix_from_traces(region: str, t: int, traces: Mapping[int, Iterable[int]],
                       v_max: int = DEFAULT_V_MAX) -> ConsumptionMatrix:
    return ConsumptionMatrix.from_rows(region, t, {i: list(v) for i, v in traces.items()}, v_max)
