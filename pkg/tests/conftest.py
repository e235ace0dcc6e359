from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from pfgnn.network import Branch, Bus, BusType, Network
from pfgnn.synth import generate_case, load_params


def two_bus(p=-0.5, q=-0.2, r=0.01, x=0.1, b=0.0, tap=1.0) -> Network:
    return Network(
        100.0,
        (Bus(1, BusType.SLACK, vm=1.0), Bus(2, BusType.PQ, p=p, q=q)),
        (Branch(1, 2, r, x, b, tap),),
    )


def four_bus() -> Network:
    """Slack, two loads and a generator in a small meshed grid."""
    buses = (
        Bus(1, BusType.SLACK, vm=1.02),
        Bus(2, BusType.PQ, p=-0.4, q=-0.1),
        Bus(3, BusType.PV, p=0.2, vm=1.01),
        Bus(4, BusType.PQ, p=-0.3, q=-0.15),
    )
    branches = (
        Branch(1, 2, 0.01, 0.05, 0.02),
        Branch(2, 3, 0.02, 0.08, 0.01),
        Branch(3, 4, 0.015, 0.06),
        Branch(1, 4, 0.01, 0.04, 0.0, tap=1.02),
    )
    return Network(100.0, buses, branches)


def ring(n: int, r=0.01, x=0.05) -> Network:
    buses = [Bus(1, BusType.SLACK)] + [Bus(i, BusType.PQ, p=-0.01, q=-0.005)
                                       for i in range(2, n + 1)]
    branches = [Branch(i, i % n + 1, r, x) for i in range(1, n + 1)]
    return Network(10.0, tuple(buses), tuple(branches))


@pytest.fixture(scope="session")
def small_cases():
    """Twenty solved synthetic MV cases of 5 to 15 buses."""
    topo, supply = load_params()
    topo = replace(topo, n_buses=(5, 15))
    return [generate_case(topo, supply, i) for i in range(20)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
