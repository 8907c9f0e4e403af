"""Deterministic key material for a fleet, derived from the run seed."""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path

from .attestation import (
    AttestationAuthority,
    Credential,
    UtilityProvider,
    derive_seed,
    raw_public,
    signing_key,
)
from .fleet import FleetConfig, GroupConfig
from .group import GroupParams, from_hex, setup_group, to_hex
from .homomorphic import ProducerKeys, producer_keygen
from .model import MeterId


def group_from_config(gc: GroupConfig, seed: int) -> GroupParams:
    if gc.p is not None:
        return GroupParams(from_hex(gc.p), from_hex(gc.q), from_hex(gc.g))
    return setup_group(gc.bits, rng=random.Random(f"group/{seed}"))


def _exponent(seed: int, label: str, q: int) -> int:
    width = (q.bit_length() + 7) // 8 + 16
    raw = hashlib.shake_256(f"meteragg/{seed}/{label}".encode()).digest(width)
    return int.from_bytes(raw, "big") % (q - 1) + 1


class KeyMaterial:
    def __init__(self, seed: int, meters: list[MeterId], params: GroupParams | None = None):
        self.seed = seed
        self.meters = list(meters)
        self.params = params
        self._utility_key = signing_key(derive_seed(seed, "utility"))
        self._authority_key = signing_key(derive_seed(seed, "attestation-authority"))
        self.utility = UtilityProvider(self._utility_key)
        self.authority = AttestationAuthority(self._authority_key)
        self._meter_keys = {m: signing_key(derive_seed(seed, f"meter/{m}")) for m in self.meters}
        self._creds = {m: self.utility.provision(m, raw_public(k))
                       for m, k in self._meter_keys.items()}
        self._producers: dict[MeterId, ProducerKeys] = {}

    def meter_key(self, m: MeterId):
        return self._meter_keys[m]

    def credential(self, m: MeterId) -> Credential:
        return self._creds[m]

    def producer_keys(self, m: MeterId) -> ProducerKeys:
        if self.params is None:
            raise ValueError("no group parameters configured")
        if m not in self._producers:
            x = _exponent(self.seed, f"hom-x/{m}", self.params.q)
            self._producers[m] = producer_keygen(self.params, m, self._utility_key, x=x)
        return self._producers[m]

    def write(self, out_dir: str | Path, measurement: bytes | None = None) -> list[Path]:
        """One JSON file per role, hex-encoded; one file per meter."""
        out = Path(out_dir)
        (out / "meters").mkdir(parents=True, exist_ok=True)
        written = []

        def dump(path: Path, obj: dict) -> None:
            path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            written.append(path)

        dump(out / "utility.json", {
            "role": "utility",
            "signing_key": self._utility_key.private_bytes_raw().hex(),
            "public_key": self.utility.public_key.hex()})
        dump(out / "attestation_authority.json", {
            "role": "attestation_authority",
            "signing_key": self._authority_key.private_bytes_raw().hex(),
            "public_key": self.authority.public_key.hex()})
        agg = {"role": "aggregator"}
        if self.params is not None:
            agg["group"] = self.params.to_json()
        if measurement is not None:
            agg["enclave_measurement"] = measurement.hex()
        dump(out / "aggregator.json", agg)
        for m in self.meters:
            cred = self._creds[m]
            obj = {
                "role": "meter", "region": m.region, "meter": m.index,
                "signing_key": self._meter_keys[m].private_bytes_raw().hex(),
                "credential": {"public_key": cred.public_key.hex(),
                               "signature": cred.signature.hex()},
            }
            if self.params is not None:
                pk = self.producer_keys(m)
                obj["producer"] = {"x": to_hex(pk.x), "y": to_hex(pk.y),
                                   "cert_signature": pk.cert.signature.hex()}
            dump(out / "meters" / f"meter-{m.index:05d}.json", obj)
        return written


def key_material(fleet: FleetConfig, seed: int, with_group: bool = True) -> KeyMaterial:
    params = group_from_config(fleet.group, seed) if with_group else None
    return KeyMaterial(seed, fleet.meter_ids, params)
