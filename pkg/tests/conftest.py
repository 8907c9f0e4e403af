import random

import pytest

from meteragg.fleet import FleetConfig
from meteragg.group import TOY_GROUP, setup_group


@pytest.fixture(scope="session")
def toy():
    return TOY_GROUP


@pytest.fixture(scope="session")
def group31():
    """Seeded safe-prime group with q close to 2^31."""
    return setup_group(32, rng=random.Random("group31"))


def small_fleet(n=10, t=8, seed=7, faults=(), window=2, fraction=0.2, bits=64, **extra):
    return FleetConfig.model_validate({
        "region": "north", "n": n, "t": t, "seed": seed,
        "profiles": [{"base_wh": 120, "spike_prob": 0.3, "spike_wh": 900},
                     {"base_wh": 60, "spike_prob": 0.1, "spike_wh": 2500}],
        "faults": [{"meter": m, "start": a, "end": b} for m, a, b in faults],
        "policy": {"window": window, "max_failed_fraction": fraction},
        "group": {"bits": bits},
        **extra,
    })


@pytest.fixture
def fleet_factory():
    return small_fleet


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
