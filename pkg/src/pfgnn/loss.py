"""Unsupervised power-balance loss.

The same residual kernel serves the Newton-Raphson mismatch, so solver and
metric can never disagree about what a solution is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyBatch
from .network import AdmittanceMatrix, GridState, Network, build_ybus, disjoint_union


def calc_injections(ybus: AdmittanceMatrix, vm: np.ndarray, va: np.ndarray):
    """Real and reactive injections implied by the voltages."""
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus.matrix @ v)
    return s.real, s.imag


def _check_dims(net: Network, ybus: AdmittanceMatrix, state: GridState):
    if not (net.n_bus == ybus.n == state.n_bus):
        raise DimensionMismatch(
            f"network has {net.n_bus} buses, Ybus {ybus.n}, state {state.n_bus}"
        )


def node_residuals(net: Network, ybus: AdmittanceMatrix, state: GridState):
    """Per-bus (L_P, L_Q): specified minus computed injection, per-unit."""
    _check_dims(net, ybus, state)
    pc, qc = calc_injections(ybus, state.vm, state.va)
    return state.p - pc, state.q - qc


def total_loss(residuals) -> float:
    lp, lq = residuals
    return math.fsum(np.abs(np.concatenate([np.ravel(lp), np.ravel(lq)])).tolist())


def train_loss(residuals) -> float:
    lp, lq = residuals
    sq = np.concatenate([np.ravel(lp), np.ravel(lq)]) ** 2
    return math.log1p(math.fsum(sq.tolist()))


@dataclass(frozen=True, eq=False)
class LossReport:
    per_node_p: np.ndarray
    per_node_q: np.ndarray
    total: float
    train: float
    per_node_mva: float
    base_mva: float

    @property
    def n_bus(self) -> int:
        return len(self.per_node_p)

    def to_dict(self) -> dict:
        return {
            "per_node_p": self.per_node_p.tolist(),
            "per_node_q": self.per_node_q.tolist(),
            "total": self.total,
            "train": self.train,
            "per_node_mva": self.per_node_mva,
            "base_mva": self.base_mva,
        }


def loss_report(residuals, base_mva: float) -> LossReport:
    lp, lq = (np.asarray(r, dtype=float) for r in residuals)
    total = total_loss((lp, lq))
    n = max(len(lp), 1)
    return LossReport(
        per_node_p=np.abs(lp),
        per_node_q=np.abs(lq),
        total=total,
        train=train_loss((lp, lq)),
        per_node_mva=total * base_mva / n,
        base_mva=base_mva,
    )


def evaluate(net: Network, state: GridState, ybus: AdmittanceMatrix | None = None) -> LossReport:
    if ybus is None:
        ybus = build_ybus(net)
    return loss_report(node_residuals(net, ybus, state), net.base_mva)


def batched_loss(batch: Sequence[tuple[Network, GridState]]):
    """Evaluate a batch on the disjoint union of its graphs.

    Returns the summed train loss and one report per graph.
    """
    if not batch:
        raise EmptyBatch("batched_loss needs at least one graph")
    nets = [n for n, _ in batch]
    states = [s for _, s in batch]
    for net, st in batch:
        if net.n_bus != st.n_bus:
            raise DimensionMismatch(f"state has {st.n_bus} buses, network {net.n_bus}")
    union = disjoint_union(nets)
    rows, cols, _, _ = union.ybus.coo
    g = union.graph_of_bus
    if np.any(g[rows] != g[cols]):
        raise AssertionError("disjoint union has cross-graph admittance entries")

    vm = np.concatenate([s.vm for s in states])
    va = np.concatenate([s.va for s in states])
    pc, qc = calc_injections(union.ybus, vm, va)
    lp = np.concatenate([s.p for s in states]) - pc
    lq = np.concatenate([s.q for s in states]) - qc
    reports = [
        loss_report((a, b), net.base_mva)
        for a, b, net in zip(union.split(lp), union.split(lq), nets)
    ]
    return math.fsum(r.train for r in reports), reports
