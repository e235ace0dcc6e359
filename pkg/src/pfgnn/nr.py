"""Newton-Raphson AC power flow in polar coordinates."""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Diverged, SingularJacobian
from .loss import calc_injections, node_residuals
from .network import (
    AdmittanceMatrix,
    BusType,
    GridState,
    Network,
    build_ybus,
    flat_state,
)

DENSE_LIMIT = 500


@dataclass(frozen=True)
class NrOptions:
    tol: float = 1e-8
    max_iter: int = 30
    # "auto" picks dense LAPACK up to DENSE_LIMIT unknowns, sparse LU above
    linear_solver: str = "auto"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.linear_solver not in ("auto", "dense", "sparse"):
            raise ValueError("linear_solver must be 'auto', 'dense' or 'sparse'")


@dataclass(frozen=True)
class NrReport:
    converged: bool
    iterations: int
    final_mismatch: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


def power_mismatch(net: Network, ybus: AdmittanceMatrix, state: GridState):
    return node_residuals(net, ybus, state)


def _unknown_sets(net: Network):
    types = net.bus_types
    pvpq = np.flatnonzero(types != BusType.SLACK)
    pq = np.flatnonzero(types == BusType.PQ)
    return pvpq, pq


class _JacobianPattern:
    """Positions of the Ybus entries inside the mismatch Jacobian.

    Built once per solve; each iteration only fills values.
    """

    def __init__(self, ybus: AdmittanceMatrix, pvpq: np.ndarray, pq: np.ndarray):
        n = ybus.n
        rows, cols, g, b = ybus.coo
        diag = np.arange(n)
        # off-diagonal terms come from every stored entry, diagonal terms from the bus current
        self.i = np.concatenate([rows, diag])
        self.k = np.concatenate([cols, diag])
        self.y = np.concatenate([g + 1j * b, np.zeros(n)])
        self.n_entries = len(rows)
        npvpq = len(pvpq)
        self.size = npvpq + len(pq)
        ang = np.full(n, -1)
        ang[pvpq] = np.arange(npvpq)
        mag = np.full(n, -1)
        mag[pq] = npvpq + np.arange(len(pq))
        ri_a, ri_m = ang[self.i], mag[self.i]
        ck_a, ck_m = ang[self.k], mag[self.k]
        # blocks (P, angle), (P, magnitude), (Q, angle), (Q, magnitude)
        self.blocks = []
        for r, c, wrt_mag, imag in ((ri_a, ck_a, False, False), (ri_a, ck_m, True, False),
                                    (ri_m, ck_a, False, True), (ri_m, ck_m, True, True)):
            keep = np.flatnonzero((r >= 0) & (c >= 0))
            self.blocks.append((keep, r[keep], c[keep], wrt_mag, imag))
        self.rows = np.concatenate([blk[1] for blk in self.blocks])
        self.cols = np.concatenate([blk[2] for blk in self.blocks])

    def values(self, ybus: AdmittanceMatrix, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        v = vm * np.exp(1j * va)
        vn = np.exp(1j * va)
        ibus = ybus.matrix @ v
        vi, vk = v[self.i], v[self.k]
        ds_dvm = vi * np.conj(self.y * vn[self.k])
        ds_dva = -1j * vi * np.conj(self.y * vk)
        m = self.n_entries
        ds_dvm[m:] += np.conj(ibus) * vn
        ds_dva[m:] += 1j * v * np.conj(ibus)
        parts = []
        for keep, _, _, wrt_mag, imag in self.blocks:
            d = (ds_dvm if wrt_mag else ds_dva)[keep]
            parts.append(d.imag if imag else d.real)
        # derivative of the mismatch, i.e. of (specified - computed)
        return -np.concatenate(parts)

    def sparse(self, vals: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((vals, (self.rows, self.cols)), shape=(self.size, self.size))

    def dense(self, vals: np.ndarray) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        np.add.at(out, (self.rows, self.cols), vals)
        return out


def nr_jacobian(net: Network, ybus: AdmittanceMatrix, state: GridState) -> sp.csr_matrix:
    """Jacobian of the mismatch w.r.t. the unknown angles then magnitudes.

    Rows are P equations of PQ and PV buses followed by Q equations of PQ
    buses, in bus order.
    """
    pvpq, pq = _unknown_sets(net)
    pat = _JacobianPattern(ybus, pvpq, pq)
    return pat.sparse(pat.values(ybus, np.asarray(state.vm, dtype=float),
                                 np.asarray(state.va, dtype=float)))


def _use_dense(size: int, mode: str) -> bool:
    return mode == "dense" or (mode == "auto" and size <= DENSE_LIMIT)


def _linear_solve(pat: _JacobianPattern, vals: np.ndarray, rhs: np.ndarray, iteration: int,
                  dense: bool) -> np.ndarray:
    try:
        if dense:
            dx = np.linalg.solve(pat.dense(vals), rhs)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                dx = spla.spsolve(pat.sparse(vals).tocsc(), rhs)
    except (np.linalg.LinAlgError, spla.MatrixRankWarning, RuntimeError):
        raise SingularJacobian(iteration) from None
    if not np.all(np.isfinite(dx)):
        raise SingularJacobian(iteration)
    return dx


def solve_nr(
    net: Network,
    start: GridState | None = None,
    opts: NrOptions | None = None,
    ybus: AdmittanceMatrix | None = None,
) -> tuple[GridState, NrReport]:
    t0 = time.perf_counter()
    opts = opts or NrOptions()
    ybus = ybus if ybus is not None else build_ybus(net)
    start = start if start is not None else flat_state(net)
    pvpq, pq = _unknown_sets(net)
    npvpq = len(pvpq)
    pat = _JacobianPattern(ybus, pvpq, pq)
    dense = _use_dense(pat.size, opts.linear_solver)

    p_spec = np.asarray(start.p)
    q_spec = np.asarray(start.q)
    vm = np.array(start.vm, dtype=float)
    va = np.array(start.va, dtype=float)

    it = 0
    while True:
        pc, qc = calc_injections(ybus, vm, va)
        f = np.concatenate([(p_spec - pc)[pvpq], (q_spec - qc)[pq]])
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(norm):
            raise Diverged(it, norm)
        if norm <= opts.tol:
            break
        if it >= opts.max_iter:
            raise Diverged(it, norm)
        it += 1
        dx = _linear_solve(pat, pat.values(ybus, vm, va), -f, it, dense)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]

    types = net.bus_types
    p = np.where(types == BusType.SLACK, pc, p_spec)
    q = np.where(types == BusType.PQ, q_spec, qc)
    state = GridState(p, q, vm, va, start.known)
    report = NrReport(True, it, norm, time.perf_counter() - t0)
    return state, report
