"""Deterministic household load traces, fault schedules and the fleet config file."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError
from .model import DEFAULT_V_MAX, MeterId, TimeSlot

RNG_ALGORITHM = ("numpy.PCG64/SeedSequence(entropy=seed, spawn_key=(index, crc32(region)));"
                 " per slot random((1, 2)): coin, spike = 1 + floor(u * spike_wh)")


@dataclass(frozen=True)
class LoadProfile:
    seed: int
    base_wh: int
    spike_prob: float | Fraction = 0.0
    spike_wh: int = 0

    def validate(self, v_max: int = DEFAULT_V_MAX) -> None:
        if self.base_wh < 0 or self.spike_wh < 0:
            raise ConfigError("profile energies must be non-negative")
        if not 0 <= self.spike_prob <= 1:
            raise ConfigError("spike_prob must lie in [0, 1]")
        if self.base_wh + self.spike_wh > v_max:
            raise ConfigError(f"base_wh + spike_wh exceeds v_max={v_max}")


def _rng_for(seed: int, meter: MeterId) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed & (2**64 - 1),
                                spawn_key=(meter.index, zlib.crc32(meter.region.encode())))
    return np.random.Generator(np.random.PCG64(ss))


def generate_trace(profile: LoadProfile, meter: MeterId, t: int,
                   v_max: int = DEFAULT_V_MAX) -> list[int]:
    """Per-slot consumption for one meter: ``base_wh`` plus, with probability
    ``spike_prob``, a uniform spike in ``1..spike_wh``."""
    if t < 1:
        raise ConfigError("t must be >= 1")
    profile.validate(v_max)
    rng = _rng_for(profile.seed, meter)
    # One (coin, spike) pair per slot, so a shorter trace is a prefix of a longer one.
    u = rng.random((t, 2))
    spikes = 1 + np.floor(u[:, 1] * profile.spike_wh).astype(np.int64)
    spike = (u[:, 0] < float(profile.spike_prob)) & (profile.spike_wh > 0)
    values = profile.base_wh + np.where(spike, spikes, 0)
    return [int(v) for v in values]


@dataclass(frozen=True)
class Outage:
    meter: MeterId
    start: int
    end: int  # inclusive

    def covers(self, j: int) -> bool:
        return self.start <= j <= self.end


class FaultPlan:
    def __init__(self, outages=(), t: int | None = None):
        self.outages: list[Outage] = list(outages)
        seen: set[tuple[MeterId, int]] = set()
        for o in self.outages:
            if o.start < 1 or o.end < o.start or (t is not None and o.end > t):
                raise ConfigError(f"outage range {o.start}..{o.end} invalid for t={t}")
            for j in range(o.start, o.end + 1):
                if (o.meter, j) in seen:
                    raise ConfigError(f"duplicate outage for {o.meter} at slot {j}")
                seen.add((o.meter, j))

    def faulted(self, slot: TimeSlot | int) -> set[MeterId]:
        j = slot.j if isinstance(slot, TimeSlot) else slot
        return {o.meter for o in self.outages if o.covers(j)}

    def __len__(self):
        return len(self.outages)


def faulted(plan: FaultPlan, slot: TimeSlot | int) -> set[MeterId]:
    return plan.faulted(slot)


# --- fleet config file -------------------------------------------------------

class ProfileConfig(BaseModel):
    base_wh: int = Field(ge=0)
    spike_prob: float = Field(ge=0.0, le=1.0, default=0.0)
    spike_wh: int = Field(ge=0, default=0)
    seed: int | None = None


class OutageConfig(BaseModel):
    meter: int = Field(ge=1)
    start: int = Field(ge=1)
    end: int = Field(ge=1)


class PolicyConfig(BaseModel):
    window: int = Field(ge=1, default=3)
    max_failed_fraction: float = Field(ge=0.0, le=1.0, default=0.2)


class GroupConfig(BaseModel):
    bits: int | None = Field(default=None, ge=16)
    p: str | None = None
    q: str | None = None
    g: str | None = None

    @model_validator(mode="after")
    def _one_form(self):
        explicit = (self.p, self.q, self.g)
        if self.bits is None and any(x is None for x in explicit):
            raise ValueError("group needs either bits or all of p, q, g (hex)")
        return self


class FleetConfig(BaseModel):
    region: str = Field(min_length=1)
    n: int = Field(ge=1, le=0xFFFF)
    t: int = Field(ge=1, default=96)
    slot_duration: int = Field(gt=0, default=900)
    seed: int = 0
    v_max: int = Field(ge=0, default=DEFAULT_V_MAX)
    profiles: list[ProfileConfig] = Field(min_length=1)
    faults: list[OutageConfig] = Field(default_factory=list)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    group: GroupConfig = Field(default_factory=lambda: GroupConfig(bits=2048))
    quote_verifier: Literal["meter", "service"] = "meter"

    @model_validator(mode="after")
    def _check(self):
        if any(ch.isspace() for ch in self.region):
            raise ValueError("region must not contain whitespace")
        for o in self.faults:
            if o.meter > self.n:
                raise ValueError(f"fault plan names meter {o.meter} but n={self.n}")
        return self

    @property
    def meter_ids(self) -> list[MeterId]:
        return [MeterId(self.region, i) for i in range(1, self.n + 1)]

    def profile_for(self, meter: MeterId) -> LoadProfile:
        """Profiles are assigned round-robin over meter indices."""
        pc = self.profiles[(meter.index - 1) % len(self.profiles)]
        seed = self.seed if pc.seed is None else pc.seed
        return LoadProfile(seed, pc.base_wh, pc.spike_prob, pc.spike_wh)

    def fault_plan(self) -> FaultPlan:
        return FaultPlan((Outage(MeterId(self.region, o.meter), o.start, o.end)
                          for o in self.faults), t=self.t)

    def traces(self, slots: int) -> dict[MeterId, list[int]]:
        return {m: generate_trace(self.profile_for(m), m, slots, self.v_max)
                for m in self.meter_ids}


def load_fleet_config(path: str | Path) -> FleetConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = FleetConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"bad fleet config {path}: {exc}") from exc
    for m in cfg.meter_ids[:len(cfg.profiles)]:
        cfg.profile_for(m).validate(cfg.v_max)
    return cfg
