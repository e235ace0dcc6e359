from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfgnn.errors import ComponentWithoutSlack, DimensionMismatch, SingularBranch
from pfgnn.network import (
    KNOWN,
    Branch,
    Bus,
    BusType,
    GridState,
    Network,
    apply_state,
    build_ybus,
    disjoint_union,
    flat_state,
    split_by_slack,
    validate_network,
)

from conftest import four_bus, ring, two_bus


def test_known_sets_per_bus_type():
    assert KNOWN[BusType.PQ] == (True, True, False, False)
    assert KNOWN[BusType.PV] == (True, False, True, False)
    assert KNOWN[BusType.SLACK] == (False, False, True, True)


def test_minimal_network_is_valid():
    assert validate_network(two_bus()) == []


def test_two_slacks_reported():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.SLACK)), (Branch(1, 2, 0.0, 0.1),))
    assert [v.kind for v in validate_network(net)] == ["MultipleSlack"]


def test_isolated_bus_reported():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.PQ), Bus(3, BusType.PQ)),
                  (Branch(1, 2, 0.0, 0.1),))
    assert [str(v) for v in validate_network(net)] == ["Disconnected(bus=3)"]


def test_violations_cover_branch_invariants():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.PQ)), (
        Branch(1, 2, 0.0, 0.0),
        Branch(2, 2, 0.1, 0.1),
        Branch(1, 2, 0.1, 0.1, tap=0.0),
        Branch(1, 9, 0.1, 0.1),
    ))
    kinds = [(v.kind, v.branch) for v in validate_network(net)]
    assert kinds == [("ZeroImpedance", 0), ("SelfLoop", 1), ("NonPositiveTap", 2),
                     ("UnknownBus", 3)]


def test_no_slack_and_duplicate_ids():
    net = Network(1.0, (Bus(1, BusType.PQ), Bus(1, BusType.PQ)))
    kinds = [v.kind for v in validate_network(net)]
    assert kinds == ["DuplicateBusId", "NoSlack"]


def test_open_branch_does_not_connect():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.PQ)),
                  (Branch(1, 2, 0.0, 0.1, in_service=False),))
    assert [str(v) for v in validate_network(net)] == ["Disconnected(bus=2)"]


def test_split_identity_on_connected_net():
    net = four_bus()
    assert split_by_slack(net) == [net]


def test_split_two_rings():
    a = ring(4)
    b_buses = [Bus(b.id + 10, b.bus_type, b.p, b.q) for b in ring(3).buses]
    b_branches = [Branch(br.from_bus + 10, br.to_bus + 10, br.r, br.x) for br in ring(3).branches]
    joined = Network(10.0, a.buses + tuple(b_buses), a.branches + tuple(b_branches))
    parts = split_by_slack(joined)
    assert [p.n_bus for p in parts] == [4, 3]
    assert all(validate_network(p) == [] for p in parts)


def _chain(start_id: int, n: int) -> tuple[list[Bus], list[Branch]]:
    buses = [Bus(start_id, BusType.SLACK)] + [Bus(start_id + i, BusType.PQ) for i in range(1, n)]
    branches = [Branch(start_id + i, start_id + i + 1, 0.01, 0.02) for i in range(n - 1)]
    return buses, branches


def test_split_sizes_100_and_20():
    b1, r1 = _chain(0, 100)
    b2, r2 = _chain(1000, 20)
    parts = split_by_slack(Network(1.0, tuple(b1 + b2), tuple(r1 + r2)))
    assert [p.n_bus for p in parts] == [100, 20]


def test_split_preserves_multisets():
    b1, r1 = _chain(0, 7)
    b2, r2 = _chain(100, 5)
    net = Network(1.0, tuple(b2 + b1), tuple(r1 + r2))
    parts = split_by_slack(net)
    assert Counter(b for p in parts for b in p.buses) == Counter(net.buses)
    assert Counter(br for p in parts for br in p.branches) == Counter(net.branches)


def test_split_component_without_slack():
    b1, r1 = _chain(0, 3)
    orphan = [Bus(50, BusType.PQ), Bus(51, BusType.PQ)]
    with pytest.raises(ComponentWithoutSlack) as exc:
        split_by_slack(Network(1.0, tuple(b1 + orphan), tuple(r1 + [Branch(50, 51, 0.1, 0.1)])))
    assert exc.value.component == 1


def test_ybus_without_branches_is_zero():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.PQ)))
    y = build_ybus(net)
    assert y.n == 2
    assert not np.any(y.to_dense())


def test_ybus_two_bus_pure_reactance():
    y = build_ybus(two_bus(r=0.0, x=0.1))
    # oracle: 1 / (0 + 0.1j) = -10j
    series = 1 / complex(0.0, 0.1)
    assert y.entries[(0, 1)] == pytest.approx(((-series).real, (-series).imag))
    assert y.entries[(0, 1)] == pytest.approx((0.0, 10.0))
    assert y.entries[(0, 0)] == pytest.approx((0.0, -10.0))


def test_ybus_tap_and_charging():
    r, x, b, tap = 0.02, 0.1, 0.04, 1.05
    y = build_ybus(two_bus(r=r, x=x, b=b, tap=tap)).to_dense()
    ys = 1 / complex(r, x)
    assert y[0, 0] == pytest.approx(ys / tap**2 + 0.5j * b, abs=1e-12)
    assert y[1, 1] == pytest.approx(ys + 0.5j * b, abs=1e-12)
    assert y[0, 1] == pytest.approx(-ys / tap, abs=1e-12)
    assert y[1, 0] == pytest.approx(-ys / tap, abs=1e-12)


def test_ybus_singular_branch():
    with pytest.raises(SingularBranch):
        build_ybus(two_bus(r=0.0, x=0.0))


def test_ring_ybus_symmetric():
    y = build_ybus(ring(6)).to_dense()
    np.testing.assert_array_equal(y, y.T)


def test_flat_state_per_type():
    st = flat_state(four_bus())
    np.testing.assert_array_equal(st.vm, [1.02, 1.0, 1.01, 1.0])
    np.testing.assert_array_equal(st.va, [0.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(st.p, [0.0, -0.4, 0.2, -0.3])
    np.testing.assert_array_equal(st.q, [0.0, -0.1, 0.0, -0.15])


def test_grid_state_is_read_only():
    st = flat_state(two_bus())
    with pytest.raises(ValueError):
        st.vm[0] = 2.0


def test_apply_state_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        apply_state(four_bus(), flat_state(two_bus()))


def test_disjoint_union_is_block_diagonal():
    nets = [two_bus(), four_bus(), ring(5)]
    batch = disjoint_union(nets)
    assert batch.n_bus == 11
    dense = batch.ybus.to_dense()
    for g, net in enumerate(nets):
        a, b = batch.bus_offsets[g], batch.bus_offsets[g + 1]
        np.testing.assert_array_equal(dense[a:b, a:b], build_ybus(net).to_dense())
        dense[a:b, a:b] = 0
    assert not np.any(dense)


# --- properties -----------------------------------------------------------------

@st.composite
def random_networks(draw, taps=True, charging=True):
    n = draw(st.integers(2, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    types = [BusType.SLACK] + [BusType.PV if u < 0.2 else BusType.PQ for u in rng.random(n - 1)]
    buses = tuple(Bus(10 * i + 1, t, p=float(rng.normal()), q=float(rng.normal()),
                      vm=float(rng.uniform(0.95, 1.05))) for i, t in enumerate(types))
    branches = []
    for i in range(1, n):
        j = int(rng.integers(0, i))
        branches.append(Branch(buses[j].id, buses[i].id, float(rng.uniform(0.001, 0.1)),
                               float(rng.uniform(0.001, 0.1)),
                               float(rng.uniform(0, 0.05)) if charging else 0.0,
                               float(rng.uniform(0.9, 1.1)) if taps else 1.0))
    for _ in range(draw(st.integers(0, 3))):
        a, b = rng.choice(n, 2, replace=False)
        branches.append(Branch(buses[a].id, buses[b].id, 0.02, 0.05))
    return Network(1.0, buses, tuple(branches))


@settings(max_examples=100, deadline=None)
@given(random_networks())
def test_ybus_shape_and_structural_symmetry(net):
    y = build_ybus(net)
    assert y.n == net.n_bus
    keys = set(y.entries)
    assert keys == {(k, i) for i, k in keys}


@settings(max_examples=100, deadline=None)
@given(random_networks(taps=False, charging=False))
def test_ybus_rows_sum_to_zero(net):
    dense = build_ybus(net).to_dense()
    np.testing.assert_allclose(dense.sum(axis=1), 0, atol=1e-12 * np.abs(dense).max())


@settings(max_examples=100, deadline=None)
@given(random_networks())
def test_flat_state_keeps_specified_values(net):
    st = flat_state(net)
    values = st.as_array()
    np.testing.assert_array_equal(values[net.known_mask], net.values[net.known_mask])
    unknown = ~net.known_mask
    assert np.all(values[:, 2][unknown[:, 2]] == 1.0)
    assert np.all(values[:, [0, 1, 3]][unknown[:, [0, 1, 3]]] == 0.0)


@settings(max_examples=100, deadline=None)
@given(random_networks())
def test_random_networks_are_valid(net):
    assert validate_network(net) == []
    assert split_by_slack(net) == [net]


def test_grid_state_round_trip():
    net = four_bus()
    st = flat_state(net)
    assert GridState.from_array(st.as_array(), st.known) == st
