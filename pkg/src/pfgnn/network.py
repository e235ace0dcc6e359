"""Electrical network model, validation and admittance matrix construction.

Sign convention: ``p`` and ``q`` are net injections into the grid in per-unit
(generation positive, loads negative). Angles are radians.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ComponentWithoutSlack, DimensionMismatch, SingularBranch


class BusType(enum.IntEnum):
    # codes follow the MATPOWER BUS_TYPE column
    PQ = 1
    PV = 2
    SLACK = 3


# column order of the known-mask: p, q, vm, va
P, Q, VM, VA = range(4)

KNOWN = {
    BusType.PQ: (True, True, False, False),
    BusType.PV: (True, False, True, False),
    BusType.SLACK: (False, False, True, True),
}


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    p: float = 0.0
    q: float = 0.0
    vm: float = 1.0
    va: float = 0.0
    base_kv: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Violation:
    kind: str
    bus: int | None = None
    branch: int | None = None

    def __str__(self) -> str:
        if self.bus is not None:
            return f"{self.kind}(bus={self.bus})"
        if self.branch is not None:
            return f"{self.kind}(branch={self.branch})"
        return self.kind


@dataclass(frozen=True, eq=False)
class Network:
    """A single-voltage-level grid.

    ``source`` optionally carries the case document the network was read from,
    so solutions can be written back without losing unrelated columns.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    source: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.base_mva == other.base_mva
            and self.buses == other.buses
            and self.branches == other.branches
        )

    __hash__ = None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_types(self) -> np.ndarray:
        return _frozen(np.array([int(b.bus_type) for b in self.buses], dtype=np.int64))

    @cached_property
    def known_mask(self) -> np.ndarray:
        mask = np.array([KNOWN[b.bus_type] for b in self.buses], dtype=bool)
        return _frozen(mask.reshape(self.n_bus, 4))

    @cached_property
    def values(self) -> np.ndarray:
        """(n, 4) array of the stored p, q, vm, va per bus."""
        v = np.array([(b.p, b.q, b.vm, b.va) for b in self.buses], dtype=float)
        return _frozen(v.reshape(self.n_bus, 4))

    @cached_property
    def active_branches(self) -> tuple[int, ...]:
        return tuple(i for i, br in enumerate(self.branches) if br.in_service)

    @cached_property
    def branch_arrays(self) -> dict[str, np.ndarray]:
        """Arrays over in-service branches, bus references as positions."""
        act = [self.branches[i] for i in self.active_branches]
        idx = self.index
        return {
            "f": np.array([idx[b.from_bus] for b in act], dtype=np.int64),
            "t": np.array([idx[b.to_bus] for b in act], dtype=np.int64),
            "r": np.array([b.r for b in act], dtype=float),
            "x": np.array([b.x for b in act], dtype=float),
            "b": np.array([b.b_charging for b in act], dtype=float),
            "tap": np.array([b.tap for b in act], dtype=float),
        }

    @property
    def slack_positions(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.bus_type == BusType.SLACK]

    def with_buses(self, buses: Sequence[Bus]) -> "Network":
        return replace(self, buses=tuple(buses))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridState:
    """Per-bus p, q, vm, va plus which of them are specified."""

    p: np.ndarray
    q: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    known: np.ndarray

    def __post_init__(self):
        n = len(self.p)
        for name in ("p", "q", "vm", "va"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, _frozen(arr))
        known = np.array(self.known, dtype=bool)
        if known.shape != (n, 4):
            raise DimensionMismatch(f"known mask has shape {known.shape}")
        object.__setattr__(self, "known", _frozen(known))

    @property
    def n_bus(self) -> int:
        return len(self.p)

    def as_array(self) -> np.ndarray:
        return np.stack([self.p, self.q, self.vm, self.va], axis=1)

    @classmethod
    def from_array(cls, values: np.ndarray, known: np.ndarray) -> "GridState":
        values = np.asarray(values, dtype=float)
        return cls(values[:, P], values[:, Q], values[:, VM], values[:, VA], known)

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return bool(
            np.array_equal(self.as_array(), other.as_array())
            and np.array_equal(self.known, other.known)
        )

    __hash__ = None


def validate_network(net: Network) -> list[Violation]:
    out: list[Violation] = []
    seen: set[int] = set()
    dup: set[int] = set()
    for b in net.buses:
        if b.id in seen:
            dup.add(b.id)
        seen.add(b.id)
    out += [Violation("DuplicateBusId", bus=i) for i in sorted(dup)]

    slacks = [b.id for b in net.buses if b.bus_type == BusType.SLACK]
    if not slacks:
        out.append(Violation("NoSlack"))
    elif len(slacks) > 1:
        out.append(Violation("MultipleSlack"))

    out += [
        Violation("NonPositiveVoltage", bus=b.id)
        for b in sorted(net.buses, key=lambda b: b.id)
        if b.bus_type != BusType.PQ and not b.vm > 0
    ]

    dangling = False
    for k, br in enumerate(net.branches):
        if br.from_bus not in seen or br.to_bus not in seen:
            out.append(Violation("UnknownBus", branch=k))
            dangling = True
            continue
        if br.from_bus == br.to_bus:
            out.append(Violation("SelfLoop", branch=k))
        if br.r == 0 and br.x == 0:
            out.append(Violation("ZeroImpedance", branch=k))
        if not br.tap > 0:
            out.append(Violation("NonPositiveTap", branch=k))

    if net.buses and not dangling and not dup:
        labels = _component_labels(net)
        root = labels[net.index[slacks[0]]] if slacks else labels[0]
        out += [
            Violation("Disconnected", bus=b.id)
            for b in sorted(net.buses, key=lambda b: b.id)
            if labels[net.index[b.id]] != root
        ]
    return out


def _component_labels(net: Network) -> np.ndarray:
    arr = net.branch_arrays
    n = net.n_bus
    adj = sp.coo_matrix((np.ones(len(arr["f"])), (arr["f"], arr["t"])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def split_by_slack(net: Network) -> list[Network]:
    """One network per connected component of the in-service graph."""
    labels = _component_labels(net)
    # number components by first appearance so output order follows bus order
    order: dict[int, int] = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    comp = np.array([order[int(lab)] for lab in labels])

    parts = []
    for c in range(len(order)):
        members = np.flatnonzero(comp == c)
        if not any(net.buses[i].bus_type == BusType.SLACK for i in members):
            raise ComponentWithoutSlack(c)
        ids = {net.buses[i].id for i in members}
        branches = []
        for br in net.branches:
            ends = (br.from_bus in ids, br.to_bus in ids)
            if all(ends):
                branches.append(br)
            elif any(ends):
                # only an open branch can straddle two components
                raise ComponentWithoutSlack(c)
        parts.append(
            Network(net.base_mva, tuple(net.buses[i] for i in members), tuple(branches))
        )
    if len(parts) == 1:
        return [net]
    return parts


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Sparse complex bus admittance matrix (per-unit)."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def entries(self) -> dict[tuple[int, int], tuple[float, float]]:
        coo = self.matrix.tocoo()
        return {
            (int(i), int(k)): (float(v.real), float(v.imag))
            for i, k, v in zip(coo.row, coo.col, coo.data)
        }

    @cached_property
    def coo(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Row, column, G, B arrays of the stored entries in row-major order."""
        m = self.matrix.tocoo()
        order = np.lexsort((m.col, m.row))
        return (
            _frozen(m.row[order].astype(np.int64)),
            _frozen(m.col[order].astype(np.int64)),
            _frozen(m.data[order].real.copy()),
            _frozen(m.data[order].imag.copy()),
        )

    def to_dense(self) -> np.ndarray:
        if self.n > 2000:
            raise MemoryError("dense conversion limited to n <= 2000")
        return self.matrix.toarray()


def build_ybus(net: Network) -> AdmittanceMatrix:
    n = net.n_bus
    arr = net.branch_arrays
    for k in net.active_branches:
        br = net.branches[k]
        if br.r == 0 and br.x == 0:
            raise SingularBranch(k)
    f, t = arr["f"], arr["t"]
    y = 1.0 / (arr["r"] + 1j * arr["x"])
    tap = arr["tap"]
    half_b = 0.5j * arr["b"]
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    vals = np.concatenate([y / tap**2 + half_b, y + half_b, -y / tap, -y / tap])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    m.sum_duplicates()
    return AdmittanceMatrix(m)


def flat_state(net: Network) -> GridState:
    known = net.known_mask
    start = np.zeros((net.n_bus, 4))
    start[:, VM] = 1.0
    values = np.where(known, net.values, start)
    return GridState.from_array(values, known)


def network_state(net: Network) -> GridState:
    """The values stored on the buses, e.g. of a solved case."""
    return GridState.from_array(net.values, net.known_mask)


def apply_state(net: Network, state: GridState) -> Network:
    """Copy every value of ``state`` onto the buses of ``net``."""
    if state.n_bus != net.n_bus:
        raise DimensionMismatch(f"state has {state.n_bus} buses, network {net.n_bus}")
    buses = [
        replace(b, p=float(state.p[i]), q=float(state.q[i]),
                vm=float(state.vm[i]), va=float(state.va[i]))
        for i, b in enumerate(net.buses)
    ]
    return replace(net, buses=tuple(buses))


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of several networks.

    Bus ``i`` of graph ``g`` sits at position ``bus_offsets[g] + i``; the
    union admittance matrix is block diagonal, so no entry couples graphs.
    """

    nets: tuple[Network, ...]
    ybus: AdmittanceMatrix
    bus_offsets: np.ndarray
    branch_offsets: np.ndarray
    graph_of_bus: np.ndarray

    @property
    def n_graphs(self) -> int:
        return len(self.nets)

    @property
    def n_bus(self) -> int:
        return int(self.bus_offsets[-1])

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[a:b] for a, b in zip(self.bus_offsets[:-1], self.bus_offsets[1:])]


def disjoint_union(nets: Sequence[Network], ybuses: Sequence[AdmittanceMatrix] | None = None) -> GraphBatch:
    nets = tuple(nets)
    if ybuses is None:
        ybuses = [build_ybus(n) for n in nets]
    sizes = [n.n_bus for n in nets]
    bus_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    nbr = [len(n.active_branches) for n in nets]
    branch_offsets = np.concatenate([[0], np.cumsum(nbr)]).astype(np.int64)
    ybus = AdmittanceMatrix(sp.block_diag([y.matrix for y in ybuses], format="csr"))
    graph_of_bus = np.repeat(np.arange(len(nets)), sizes)
    return GraphBatch(nets, ybus, bus_offsets, branch_offsets, graph_of_bus)
