"""Run driver: fleet -> bus -> backend(s) -> utility sink, and the benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from scipy import stats

from .attestation import ENCLAVE_CODE_IDENTITY, compute_measurement
from .audit import AuditReport, audit_transcript
from .backends import (
    BACKENDS,
    EnclaveBackend,
    HomomorphicBackend,
    PlainBackend,
    enclave_sender,
)
from .bus import Bus
from .enclave import SubstitutionPolicy
from .errors import ConfigError
from .fleet import RNG_ALGORITHM, FleetConfig, GroupConfig
from .keys import KeyMaterial, key_material
from .model import ConsumptionMatrix, billing_total, slot_aggregate

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    fleet: FleetConfig
    backend: str = "all"
    slots: int | None = None
    out: Path | None = None
    seed: int | None = None
    window: int | None = None
    max_failed_fraction: float | None = None
    group_bits: int | None = None
    record: bool = False

    def __post_init__(self):
        if self.backend not in (*BACKENDS, "all"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.slots is not None and self.slots < 1:
            raise ConfigError("slots must be >= 1")
        updates = {}
        if self.seed is not None:
            updates["seed"] = self.seed
        policy = self.fleet.policy.model_copy(update={
            k: v for k, v in (("window", self.window),
                              ("max_failed_fraction", self.max_failed_fraction)) if v is not None})
        updates["policy"] = policy
        if self.group_bits is not None:
            updates["group"] = GroupConfig(bits=self.group_bits)
        self.fleet = self.fleet.model_copy(update=updates)

    @property
    def backends(self) -> tuple[str, ...]:
        return BACKENDS if self.backend == "all" else (self.backend,)

    @property
    def n_slots(self) -> int:
        return self.slots if self.slots is not None else self.fleet.t

    @property
    def policy(self) -> SubstitutionPolicy:
        p = self.fleet.policy
        return SubstitutionPolicy(p.window, p.max_failed_fraction)


@dataclass
class RunReport:
    metadata: dict
    records: dict[str, list] = field(default_factory=dict)
    billing: dict[str, list] = field(default_factory=dict)
    timings: dict[str, dict] = field(default_factory=dict)
    mismatches: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    audit: AuditReport | None = None
    bus: Bus | None = field(default=None, repr=False)

    @property
    def error_flagged(self) -> list[tuple[str, int]]:
        return [(b, r.slot) for b, recs in self.records.items() for r in recs
                if r.flagged and (r.reason or "").startswith("error")]

    @property
    def ok(self) -> bool:
        return not self.mismatches and not self.error_flagged and not self.errors

    def to_json(self, timings: bool = True) -> dict:
        out = {
            "metadata": self.metadata,
            "records": {b: [r.to_json() for r in recs] for b, recs in self.records.items()},
            "billing": {b: [r.to_json() for r in recs] for b, recs in self.billing.items()},
            "mismatches": self.mismatches,
            "errors": self.errors,
        }
        if timings:
            out["timings"] = self.timings
        if self.audit is not None:
            out["audit"] = {"ok": self.audit.ok, "violations": self.audit.violations}
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def build_backend(name: str, fleet: FleetConfig, policy: SubstitutionPolicy, t: int, bus: Bus,
                  keys: KeyMaterial):
    meters = fleet.meter_ids
    if name == "plain":
        return PlainBackend(fleet.region, meters, policy, t, bus, fleet.v_max)
    if name == "enclave":
        return EnclaveBackend(fleet.region, meters, policy, t, bus, keys, fleet.v_max,
                              fleet.quote_verifier)
    if name == "homomorphic":
        return HomomorphicBackend(fleet.region, meters, bus, keys, fleet.v_max)
    raise ConfigError(f"unknown backend {name!r}")


def _real_matrix(fleet: FleetConfig, traces, plan, first: int, t: int) -> ConsumptionMatrix:
    """Matrix of values actually sent in slots ``first..first+t-1``; silent cells count 0."""
    rows = {}
    for m in fleet.meter_ids:
        rows[m.index] = [0 if m in plan.faulted(j) else traces[m][j - 1]
                         for j in range(first, first + t)]
    return ConsumptionMatrix.from_rows(fleet.region, t, rows, fleet.v_max)


def simulate(cfg: RunConfig) -> RunReport:
    fleet = cfg.fleet
    t, slots = fleet.t, cfg.n_slots
    policy = cfg.policy
    plan = fleet.fault_plan()
    traces = fleet.traces(slots)
    keys = key_material(fleet, fleet.seed, with_group="homomorphic" in cfg.backends)
    bus = Bus(record=cfg.record)

    backends = [build_backend(b, fleet, policy, t, bus, keys) for b in cfg.backends]
    report = RunReport(metadata={
        "region": fleet.region, "n": fleet.n, "t": t, "slots": slots,
        "slot_duration": fleet.slot_duration, "seed": fleet.seed, "v_max": fleet.v_max,
        "rng_algorithm": RNG_ALGORITHM, "policy": policy.to_json(),
        "backends": list(cfg.backends), "quote_verifier": fleet.quote_verifier,
    })
    if keys.params is not None:
        report.metadata["group"] = {"bits": keys.params.bits, **keys.params.to_json()}

    for b in backends:
        start = time.perf_counter()
        b.setup()
        report.timings[b.name] = {"setup_ms": (time.perf_counter() - start) * 1e3, "round_ms": []}
        report.records[b.name] = []
        report.billing[b.name] = []

    for j in range(1, slots + 1):
        silent = plan.faulted(j)
        readings = {m: traces[m][j - 1] for m in fleet.meter_ids if m not in silent}
        for b in backends:
            res = b.run_slot(j, readings)
            report.records[b.name].append(res.record)
            report.timings[b.name]["round_ms"].append(res.latency_ms)
            report.errors.extend(res.errors)
        if j % t == 0:
            for b in backends:
                report.billing[b.name].extend(b.close_period())

    for b in backends:
        tm = report.timings[b.name]
        tm["total_ms"] = sum(tm["round_ms"])
        if isinstance(b, EnclaveBackend):
            report.metadata["enclave_footprint_bytes_per_meter"] = b.footprint_bytes()
            report.metadata["enclave_measurement"] = b.enclave.measurement.digest.hex()

    _check(report, fleet, traces, plan, slots, t)

    if cfg.record and cfg.backends == ("enclave",):
        sent = {m: {j: traces[m][j - 1] for j in range(1, slots + 1) if m not in plan.faulted(j)}
                for m in fleet.meter_ids}
        report.audit = audit_transcript(bus.full_transcript(), sent, enclave_sender(fleet.region))
    report.bus = bus
    if cfg.out is not None:
        report.write(cfg.out)
    return report


def _check(report: RunReport, fleet: FleetConfig, traces, plan, slots: int, t: int) -> None:
    """Compare every released, fault-free slot sum against the model oracle and
    every billing total against the real-values matrix."""
    for first in range(1, slots + 1, t):
        width = min(t, slots - first + 1)
        matrix = _real_matrix(fleet, traces, plan, first, width)
        for j in range(first, first + width):
            if plan.faulted(j):
                continue
            expect = slot_aggregate(matrix, j - first + 1)
            for name, recs in report.records.items():
                rec = recs[j - 1]
                if not rec.flagged and rec.sum != expect:
                    report.mismatches.append(f"{name} slot {j}: sum {rec.sum} != {expect}")
        if width == t:
            period = (first - 1) // t + 1
            want = {m: billing_total(matrix, m, period).total for m in matrix.meters}
            for name, recs in report.billing.items():
                for b in recs:
                    if b.period == period and b.total != want[b.meter]:
                        report.mismatches.append(
                            f"{name} billing {b.meter} period {period}: {b.total} != {want[b.meter]}")


# --- benchmark -----------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    backend: str
    n: int
    mean_ms: float
    ci95_ms: float
    runs: int

    @property
    def low(self) -> float:
        return self.mean_ms - self.ci95_ms

    @property
    def high(self) -> float:
        return self.mean_ms + self.ci95_ms


def mean_ci95(samples: Sequence[float]) -> tuple[float, float]:
    """Mean and Student-t 95% confidence half-width."""
    k = len(samples)
    mean = statistics.fmean(samples)
    if k < 2:
        return mean, math.nan
    half = stats.t.ppf(0.975, k - 1) * statistics.stdev(samples) / math.sqrt(k)
    return mean, float(half)


def bench(cfg: RunConfig, sizes: Sequence[int], runs: int = 10) -> list[BenchRow]:
    """Per-round latency for each backend and fleet size; setup (attestation,
    configuration phase) is excluded from the timed rounds."""
    if not sizes:
        raise ConfigError("bench needs at least one size")
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    rows = []
    for n in sizes:
        fleet = cfg.fleet.model_copy(update={"n": n, "faults": [], "t": max(cfg.fleet.t, runs)})
        keys = key_material(fleet, fleet.seed, with_group="homomorphic" in cfg.backends)
        traces = fleet.traces(runs)
        for name in cfg.backends:
            bus = Bus()
            b = build_backend(name, fleet, cfg.policy, fleet.t, bus, keys)
            b.setup()
            lat = []
            for j in range(1, runs + 1):
                res = b.run_slot(j, {m: traces[m][j - 1] for m in fleet.meter_ids})
                if res.record.flagged or res.errors:
                    raise ConfigError(f"benchmark round failed for {name} n={n}: {res.errors}")
                lat.append(res.latency_ms)
            mean, half = mean_ci95(lat)
            rows.append(BenchRow(name, n, mean, half, runs))
            log.info("bench %s n=%d mean=%.3fms ci95=%.3fms", name, n, mean, half)
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("backend", "n", "mean_ms", "ci95_ms"))
        for r in rows:
            w.writerow((r.backend, r.n, f"{r.mean_ms:.6f}", f"{r.ci95_ms:.6f}"))


def keygen(fleet: FleetConfig, out_dir: str | Path, seed: int | None = None) -> list[Path]:
    seed = fleet.seed if seed is None else seed
    keys = key_material(fleet, seed)
    policy = SubstitutionPolicy(fleet.policy.window, fleet.policy.max_failed_fraction)
    measurement = compute_measurement(ENCLAVE_CODE_IDENTITY, policy).digest
    return keys.write(out_dir, measurement)
