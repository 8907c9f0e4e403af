import pytest

from conftest import small_fleet
from meteragg.audit import audit_transcript
from meteragg.backends import EnclaveBackend, enclave_sender
from meteragg.bus import AGGREGATES_TOPIC, Bus, Envelope, Kind, measurements_topic
from meteragg.enclave import SubstitutionPolicy
from meteragg.errors import ConfigError, ProtocolAbort
from meteragg.keys import key_material
from meteragg.model import ConsumptionMatrix, billing_total, slot_aggregate
from meteragg.runner import RunConfig, bench, mean_ci95, simulate


def test_three_backends_agree_one_slot():
    rep = simulate(RunConfig(small_fleet(n=3, t=1), "all", slots=1))
    sums = {b: recs[0].sum for b, recs in rep.records.items()}
    assert len(set(sums.values())) == 1 and None not in sums.values()
    assert rep.ok


def test_cross_backend_exact_over_period():
    rep = simulate(RunConfig(small_fleet(n=8, t=6), "all"))
    assert rep.ok
    plain, enc, hom = (rep.records[b] for b in ("plain", "enclave", "homomorphic"))
    assert [r.sum for r in plain] == [r.sum for r in enc] == [r.sum for r in hom]
    assert rep.billing["plain"] == rep.billing["enclave"]
    assert rep.billing["homomorphic"] == []


def test_three_of_ten_faulted_flags():
    fleet = small_fleet(n=10, t=4, faults=[(1, 2, 2), (2, 2, 2), (3, 2, 2)], fraction=0.2)
    rep = simulate(RunConfig(fleet, "enclave"))
    rec = rep.records["enclave"][1]
    assert rec.flagged and rec.sum is None and rec.reason == "failed_fraction"
    assert not rep.records["enclave"][0].flagged
    assert rep.ok


def test_two_of_ten_faulted_substitutes():
    fleet = small_fleet(n=10, t=4, faults=[(1, 2, 3), (2, 3, 3)], fraction=0.2)
    rep = simulate(RunConfig(fleet, "all"))
    enc = rep.records["enclave"]
    assert (enc[1].substituted, enc[2].substituted) == (1, 2)
    assert not enc[2].flagged
    assert rep.records["homomorphic"][1].reason == "incomplete_round"
    assert rep.ok


def test_plain_sums_equal_model_50x96():
    fleet = small_fleet(n=50, t=96, seed=50)
    rep = simulate(RunConfig(fleet, "plain"))
    tr = fleet.traces(96)
    m = ConsumptionMatrix.from_rows("north", 96, {k.index: v for k, v in tr.items()})
    assert [r.sum for r in rep.records["plain"]] == [slot_aggregate(m, j) for j in range(1, 97)]
    assert {b.meter: b.total for b in rep.billing["plain"]} == \
        {k: billing_total(m, k).total for k in m.meters}


def test_enclave_billing_matches_real_values_matrix():
    fleet = small_fleet(n=50, t=12, seed=5, faults=[(4, 2, 3), (9, 5, 5)], fraction=0.5)
    rep = simulate(RunConfig(fleet, "enclave"))
    plan, tr = fleet.fault_plan(), fleet.traces(12)
    rows = {m.index: [0 if m in plan.faulted(j) else tr[m][j - 1] for j in range(1, 13)]
            for m in fleet.meter_ids}
    m = ConsumptionMatrix.from_rows("north", 12, rows)
    assert {b.meter: b.total for b in rep.billing["enclave"]} == \
        {k: billing_total(m, k).total for k in m.meters}


def test_conservation_fault_free():
    rep = simulate(RunConfig(small_fleet(n=12, t=5, seed=8), "enclave", slots=10))
    recs, bills = rep.records["enclave"], rep.billing["enclave"]
    for period in (1, 2):
        s = sum(r.sum for r in recs[(period - 1) * 5:period * 5])
        assert s == sum(b.total for b in bills if b.period == period)


def test_report_deterministic():
    cfg = lambda: RunConfig(small_fleet(n=4, t=3, faults=[(2, 2, 2)]), "all")  # noqa: E731
    a, b = simulate(cfg()), simulate(cfg())
    assert a.to_json(timings=False) == b.to_json(timings=False)
    assert a.metadata["rng_algorithm"]
    assert a.metadata["enclave_footprint_bytes_per_meter"] <= 512


def test_overrides():
    cfg = RunConfig(small_fleet(), "enclave", seed=99, window=1, max_failed_fraction=0.5,
                    group_bits=48)
    assert cfg.fleet.seed == 99
    assert cfg.policy == SubstitutionPolicy(1, 0.5)
    assert cfg.fleet.group.bits == 48
    with pytest.raises(ConfigError):
        RunConfig(small_fleet(), "paillier")
    with pytest.raises(ConfigError):
        RunConfig(small_fleet(), "all", slots=0)


def test_service_verifier_path():
    rep = simulate(RunConfig(small_fleet(n=3, t=2, quote_verifier="service"), "enclave"))
    assert rep.ok and rep.metadata["quote_verifier"] == "service"


def test_protocol_abort_names_transition():
    fleet = small_fleet(n=2, t=2)
    keys = key_material(fleet, 1, with_group=False)
    be = EnclaveBackend("north", fleet.meter_ids, SubstitutionPolicy(2, 0.2), 2, Bus(), keys)
    other = EnclaveBackend("north", fleet.meter_ids, SubstitutionPolicy(2, 0.3), 2, Bus(), keys)
    for sm in be.smart_meters.values():
        sm.expected = other.enclave.measurement
    with pytest.raises(ProtocolAbort, match="Challenged --QUOTE--> failed"):
        be.setup()


def test_revoked_meter_aborts_identify():
    fleet = small_fleet(n=2, t=2)
    keys = key_material(fleet, 1, with_group=False)
    keys.utility.revoke(fleet.meter_ids[1])
    be = EnclaveBackend("north", fleet.meter_ids, SubstitutionPolicy(2, 0.2), 2, Bus(), keys)
    with pytest.raises(ProtocolAbort, match="Identify --IDENTIFY--> failed"):
        be.setup()


def test_mean_ci95():
    mean, half = mean_ci95([10.0, 12.0, 14.0])
    assert mean == 12.0
    assert half == pytest.approx(4.303 * 2 / 3 ** 0.5, rel=1e-3)


def test_bench_rows():
    rows = bench(RunConfig(small_fleet(bits=48), "all"), [3, 6], runs=3)
    assert [(r.backend, r.n) for r in rows] == [
        ("plain", 3), ("enclave", 3), ("homomorphic", 3),
        ("plain", 6), ("enclave", 6), ("homomorphic", 6)]
    assert all(r.mean_ms > 0 and r.ci95_ms >= 0 and r.runs == 3 for r in rows)
    with pytest.raises(ConfigError):
        bench(RunConfig(small_fleet(), "plain"), [], 3)


# --- privacy-boundary audit --------------------------------------------------------

def _sent(fleet, slots):
    plan, tr = fleet.fault_plan(), fleet.traces(slots)
    return {m: {j: tr[m][j - 1] for j in range(1, slots + 1) if m not in plan.faulted(j)}
            for m in fleet.meter_ids}


def test_audit_enclave_run_clean():
    fleet = small_fleet(n=6, t=4, faults=[(3, 2, 2)], fraction=0.5)
    rep = simulate(RunConfig(fleet, "enclave", record=True))
    assert rep.audit is not None and rep.audit.ok, rep.audit.violations
    assert len(rep.audit.aggregates) == 4 and len(rep.audit.billing) == 6


def test_audit_catches_plain_baseline():
    fleet = small_fleet(n=6, t=4)
    rep = simulate(RunConfig(fleet, "plain", record=True))
    audit = audit_transcript(rep.bus.full_transcript(), _sent(fleet, 4), enclave_sender("north"))
    assert not audit.ok
    assert any("PLAIN carries reading" in v for v in audit.violations)
    assert any("outside the enclave" in v for v in audit.violations)


def test_audit_catches_injected_leak():
    fleet = small_fleet(n=4, t=2)
    rep = simulate(RunConfig(fleet, "enclave", record=True))
    sent = _sent(fleet, 2)
    m = fleet.meter_ids[0]
    bus = rep.bus
    bus.endpoint("aggregator/north").send_json(
        AGGREGATES_TOPIC, Kind.BILLING, {"debug": sent[m][1]}, 1)
    audit = audit_transcript(bus.full_transcript(), sent, enclave_sender("north"))
    assert any("carries reading" in v for v in audit.violations)


def test_audit_catches_unsealed_measurement():
    fleet = small_fleet(n=2, t=2)
    rep = simulate(RunConfig(fleet, "enclave", record=True))
    sent = _sent(fleet, 2)
    em_env = rep.bus.transcript(measurements_topic("north"))[0]
    from meteragg.channel import EncryptedMeasurement, encode_value
    em = EncryptedMeasurement.from_bytes(em_env.payload)
    leak = EncryptedMeasurement(em.meter, em.slot, em.nonce,
                                encode_value(sent[em.meter][em.slot]), em.tag)
    envs = {"region/north/measurements": [Envelope(em_env.topic, "x", Kind.MEASUREMENT,
                                                   em.slot, leak.to_bytes(), 1)]}
    audit = audit_transcript(envs, sent, enclave_sender("north"))
    assert audit.violations == ["region/north/measurements#x:1: ciphertext equals plaintext reading"]
