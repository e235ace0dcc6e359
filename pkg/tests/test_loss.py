from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfgnn import autodiff as ad
from pfgnn.errors import DimensionMismatch, EmptyBatch
from pfgnn.loss import batched_loss, evaluate, loss_report, node_residuals, total_loss, train_loss
from pfgnn.model import build_solver_graph, physics_train_loss
from pfgnn.network import Branch, Bus, BusType, GridState, Network, build_ybus, flat_state
from pfgnn.nr import solve_nr

from conftest import four_bus, ring, two_bus


def test_nr_solution_residuals_tiny(small_cases):
    for case in small_cases:
        lp, lq = node_residuals(case.net, build_ybus(case.net), case.solution)
        assert max(np.max(np.abs(lp)), np.max(np.abs(lq))) <= 1e-7


def test_flat_zero_injection_exactly_zero():
    net = Network(1.0, (Bus(1, BusType.SLACK), Bus(2, BusType.PQ), Bus(3, BusType.PQ)),
                  (Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.02, 0.1)))
    rep = evaluate(net, flat_state(net))
    assert rep.total == 0.0 and rep.train == 0.0


def test_flat_start_residual_equals_load():
    net = ring(5)
    lp, lq = node_residuals(net, build_ybus(net), flat_state(net))
    pq = net.bus_types == BusType.PQ
    np.testing.assert_allclose(lp[pq], net.values[pq, 0], atol=1e-15)
    np.testing.assert_allclose(lq[pq], net.values[pq, 1], atol=1e-15)


def test_residual_dimension_check():
    with pytest.raises(DimensionMismatch):
        node_residuals(four_bus(), build_ybus(four_bus()), flat_state(two_bus()))


def test_total_loss_examples():
    assert total_loss((np.zeros(3), np.zeros(3))) == 0.0
    assert total_loss((np.array([0.3]), np.array([-0.4]))) == pytest.approx(0.7)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60))
def test_total_loss_matches_exact_sum(values):
    half = len(values) // 2
    lp, lq = np.array(values[:half]), np.array(values[half:])
    exact = sum(Fraction(abs(v)) for v in values)
    assert abs(total_loss((lp, lq)) - float(exact)) <= 1e-12 * max(1.0, float(exact))
    # order independence
    assert total_loss((lq[::-1], lp[::-1])) == total_loss((lp, lq))


def test_train_loss_examples():
    assert train_loss((np.zeros(2), np.zeros(2))) == 0.0
    assert train_loss((np.array([1.0]), np.array([0.0]))) == pytest.approx(math.log(2))


# squares of residuals below ~1e-162 underflow to zero, so keep them representable
residual = st.one_of(st.just(0.0), st.floats(1e-150, 10), st.floats(-10, -1e-150))


@settings(max_examples=100, deadline=None)
@given(st.lists(residual, min_size=2, max_size=20))
def test_total_zero_iff_train_zero(values):
    res = (np.array(values[::2]), np.array(values[1::2]))
    assert (total_loss(res) == 0) == (train_loss(res) == 0)
    assert total_loss(res) >= 0 and train_loss(res) >= 0


def test_per_node_mva():
    rep = loss_report((np.array([0.1, -0.2]), np.array([0.0, 0.05])), base_mva=10.0)
    assert rep.total == pytest.approx(0.35)
    assert rep.per_node_mva == pytest.approx(0.35 * 10 / 2)
    np.testing.assert_array_equal(rep.per_node_p, [0.1, 0.2])


def test_train_loss_gradient_through_autodiff():
    net = four_bus()
    graph = build_solver_graph(net)
    st, _ = solve_nr(net)
    rng = np.random.default_rng(0)
    x = ad.Tensor(st.as_array() + rng.normal(0, 0.01, (4, 4)), requires_grad=True)
    err = ad.gradcheck(lambda: ad.sum_(physics_train_loss(graph, x)), [x])
    assert err <= 1e-7
    # and the value agrees with the reference implementation
    state = GridState.from_array(x.data, net.known_mask)
    assert physics_train_loss(graph, x).item() == pytest.approx(evaluate(net, state).train,
                                                                rel=1e-12)


def test_batch_of_one():
    net = four_bus()
    st = flat_state(net)
    total, reports = batched_loss([(net, st)])
    assert total == pytest.approx(evaluate(net, st).train, rel=0, abs=1e-15)
    assert len(reports) == 1


def test_batch_of_copies_identical():
    net = four_bus()
    st = flat_state(net)
    _, reports = batched_loss([(net, st)] * 3)
    for r in reports[1:]:
        np.testing.assert_array_equal(r.per_node_p, reports[0].per_node_p)
        assert r.total == reports[0].total


def test_batch_of_three_additive():
    items = [(n, flat_state(n)) for n in (two_bus(), four_bus(), ring(6))]
    total, reports = batched_loss(items)
    assert total == pytest.approx(sum(evaluate(n, s).train for n, s in items), abs=1e-9)
    for (n, s), r in zip(items, reports):
        assert r.total == pytest.approx(evaluate(n, s).total, abs=1e-12)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        batched_loss([])


def test_flat_worse_than_solution(small_cases):
    flat = np.mean([evaluate(c.net, flat_state(c.net)).per_node_mva for c in small_cases])
    solved = np.mean([evaluate(c.net, c.solution).per_node_mva for c in small_cases])
    assert flat > solved
