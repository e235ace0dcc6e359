"""Synthetic distribution grids and labelled power flow datasets.

Radial low-voltage feeders are random trees rooted at the secondary
substation; medium-voltage grids are open rings hanging off the primary
substation. Supply tasks are drawn uniformly from configurable ranges and
every case is checked by Newton-Raphson before it is accepted.
"""
from __future__ import annotations

import json
import math
import statistics
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .casefile import DatasetManifest, from_solution, split_counts, write_dataset
from .errors import GenerationStalled, NumericError
from .network import Branch, Bus, BusType, Network, flat_state, validate_network
from .nr import NrOptions, solve_nr

RADIAL_LV = "radial_lv"
RING_MV = "ring_mv"

Range = tuple[float, float]


def _range(value, name: str, integer: bool = False) -> tuple:
    lo, hi = value
    if integer:
        lo, hi = int(lo), int(hi)
    if lo > hi:
        raise ValueError(f"{name}: empty range ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class TopologyParams:
    kind: str = RING_MV
    n_buses: tuple[int, int] = (5, 30)
    # per-unit per km on the system base
    branch_r_per_km: Range = (0.0025, 0.0075)
    branch_x_per_km: Range = (0.002, 0.01)
    branch_b_per_km: Range = (0.00012, 0.004)
    segment_length_km: Range = (0.2, 2.0)
    base_mva: float = 10.0
    base_kv: float = 20.0
    feeders: tuple[int, int] = (1, 3)
    rings: tuple[int, int] = (1, 3)

    def __post_init__(self):
        if self.kind not in (RADIAL_LV, RING_MV):
            raise ValueError(f"unknown topology kind {self.kind!r}")
        for name in ("n_buses", "feeders", "rings"):
            object.__setattr__(self, name, _range(getattr(self, name), name, integer=True))
        for name in ("branch_r_per_km", "branch_x_per_km", "branch_b_per_km", "segment_length_km"):
            object.__setattr__(self, name, _range(getattr(self, name), name))
        if self.n_buses[0] < 2:
            raise ValueError("n_buses must be at least 2")
        if self.feeders[0] < 1 or self.rings[0] < 1:
            raise ValueError("feeders and rings must be at least 1")
        if self.base_mva <= 0:
            raise ValueError("base_mva must be positive")


@dataclass(frozen=True)
class SupplyParams:
    pv_node_fraction: float = 0.005
    # consumption-positive ranges; loads become negative injections
    pq_load_p_range: Range = (0.0, 0.296)
    pq_load_q_range: Range = (-0.04, 0.058)
    pv_gen_p_range: Range = (0.0, 1.014)
    pv_vset_range: Range = (0.995, 1.005)
    slack_vm: float = 1.0
    v_band: Range = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pv_node_fraction <= 1.0:
            raise ValueError("pv_node_fraction must be in [0, 1]")
        for name in ("pq_load_p_range", "pq_load_q_range", "pv_gen_p_range",
                     "pv_vset_range", "v_band"):
            object.__setattr__(self, name, _range(getattr(self, name), name))


@dataclass
class GenReport:
    attempted: int = 0
    accepted: int = 0
    nr_failures: int = 0
    band_rejections: int = 0
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def load_params(path=None) -> tuple[TopologyParams, SupplyParams]:
    """Read generator parameters; defaults to the bundled synthetic MV set."""
    if path is None:
        text = resources.files("pfgnn").joinpath("params/synthetic_mv.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    return params_from_dict(json.loads(text))


def params_from_dict(obj: dict) -> tuple[TopologyParams, SupplyParams]:
    topo = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.get("topology", {}).items()}
    supply = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.get("supply", {}).items()}
    return TopologyParams(**topo), SupplyParams(**supply)


def params_to_dict(topo: TopologyParams, supply: SupplyParams) -> dict:
    return {"topology": asdict(topo), "supply": asdict(supply)}


def _uniform(rng, rng_range, size=None):
    lo, hi = rng_range
    return rng.uniform(lo, hi, size)


def _branch(rng, params: TopologyParams, f: int, t: int, in_service: bool = True) -> Branch:
    length = _uniform(rng, params.segment_length_km)
    r = _uniform(rng, params.branch_r_per_km) * length
    x = _uniform(rng, params.branch_x_per_km) * length
    b = _uniform(rng, params.branch_b_per_km) * length
    return Branch(f, t, float(r), float(x), float(b), 1.0, in_service)


def generate_topology(params: TopologyParams, rng: np.random.Generator) -> Network:
    n = int(rng.integers(params.n_buses[0], params.n_buses[1] + 1))
    buses = [Bus(0, BusType.SLACK, base_kv=params.base_kv)]
    buses += [Bus(i, BusType.PQ, base_kv=params.base_kv) for i in range(1, n)]
    branches: list[Branch] = []

    if params.kind == RADIAL_LV:
        feeders = int(rng.integers(params.feeders[0], params.feeders[1] + 1))
        for i in range(1, n):
            parent = 0 if i <= feeders else int(rng.integers(0, i))
            branches.append(_branch(rng, params, parent, i))
    else:
        others = n - 1
        rings = int(rng.integers(params.rings[0], params.rings[1] + 1))
        rings = max(1, min(rings, others // 2))
        if others < 2:
            branches.append(_branch(rng, params, 0, 1))
        else:
            # ring sizes: each at least 2, rest distributed at random
            extra = rng.multinomial(others - 2 * rings, np.full(rings, 1.0 / rings))
            sizes = 2 + extra
            start = 1
            for size in sizes:
                members = [0] + list(range(start, start + int(size))) + [0]
                open_at = int(rng.integers(0, len(members) - 1))
                for k in range(len(members) - 1):
                    branches.append(
                        _branch(rng, params, members[k], members[k + 1], in_service=k != open_at)
                    )
                start += int(size)
    return Network(params.base_mva, tuple(buses), tuple(branches))


def assign_node_types(net: Network, supply: SupplyParams, rng: np.random.Generator) -> Network:
    draws = rng.random(net.n_bus)
    buses = []
    for b, u in zip(net.buses, draws):
        if b.bus_type != BusType.SLACK:
            b = replace(b, bus_type=BusType.PV if u < supply.pv_node_fraction else BusType.PQ)
        buses.append(b)
    return net.with_buses(buses)


def sample_supply_task(net: Network, supply: SupplyParams, rng: np.random.Generator) -> Network:
    n = net.n_bus
    base = net.base_mva
    load_p = _uniform(rng, supply.pq_load_p_range, n)
    load_q = _uniform(rng, supply.pq_load_q_range, n)
    gen_p = _uniform(rng, supply.pv_gen_p_range, n)
    vset = _uniform(rng, supply.pv_vset_range, n)
    buses = []
    for i, b in enumerate(net.buses):
        if b.bus_type == BusType.PQ:
            b = replace(b, p=-float(load_p[i]) / base + 0.0, q=-float(load_q[i]) / base + 0.0,
                        vm=1.0, va=0.0)
        elif b.bus_type == BusType.PV:
            b = replace(b, p=float(gen_p[i]) / base, q=0.0, vm=float(vset[i]), va=0.0)
        else:
            b = replace(b, p=0.0, q=0.0, vm=supply.slack_vm, va=0.0)
        buses.append(b)
    return net.with_buses(buses)


MAX_ATTEMPTS_PER_CASE = 1000


@dataclass
class CaseOutcome:
    index: int
    net: Network
    solution: object
    attempts: int
    nr_failures: int
    band_rejections: int


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_case(topo: TopologyParams, supply: SupplyParams, index: int,
                  nr_opts: NrOptions | None = None) -> CaseOutcome:
    """Draw cases from the index's own stream until one solves inside the band."""
    rng = case_rng(supply.seed, index)
    nr_fail = band = 0
    for attempt in range(1, MAX_ATTEMPTS_PER_CASE + 1):
        net = generate_topology(topo, rng)
        net = assign_node_types(net, supply, rng)
        net = sample_supply_task(net, supply, rng)
        if validate_network(net):
            nr_fail += 1
            continue
        try:
            state, _ = solve_nr(net, flat_state(net), nr_opts)
        except NumericError:
            nr_fail += 1
            continue
        lo, hi = supply.v_band
        if np.any(state.vm < lo) or np.any(state.vm > hi):
            band += 1
            continue
        return CaseOutcome(index, net, state, attempt, nr_fail, band)
    raise GenerationStalled(MAX_ATTEMPTS_PER_CASE, 0)


def _generate_case_args(args):
    return generate_case(*args)


def iter_cases(topo: TopologyParams, supply: SupplyParams, count: int,
               workers: int = 1, nr_opts: NrOptions | None = None):
    """Yield accepted cases in index order; parallel runs give identical output."""
    jobs = [(topo, supply, i, nr_opts) for i in range(count)]
    if workers <= 1 or count < 2:
        yield from map(_generate_case_args, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_generate_case_args, jobs, chunksize=max(1, count // (4 * workers)))


def dataset_stats(cases: list[tuple[Network, object]]) -> dict:
    """Mean and median node values of solved cases, MW/MVAr/pu/deg."""
    fields: dict[str, list[float]] = {k: [] for k in (
        "network_size", "pq_count", "pv_count", "p_pq_mw", "q_pq_mvar", "p_pv_mw",
        "q_pv_mvar", "p_slack_mw", "q_slack_mvar", "vm_pu", "va_deg")}
    for net, st in cases:
        types = net.bus_types
        base = net.base_mva
        fields["network_size"].append(net.n_bus)
        fields["pq_count"].append(int(np.sum(types == BusType.PQ)))
        fields["pv_count"].append(int(np.sum(types == BusType.PV)))
        for code, tag in ((BusType.PQ, "pq"), (BusType.PV, "pv"), (BusType.SLACK, "slack")):
            sel = types == code
            fields[f"p_{tag}_mw"] += (st.p[sel] * base).tolist()
            fields[f"q_{tag}_mvar"] += (st.q[sel] * base).tolist()
        fields["vm_pu"] += st.vm.tolist()
        fields["va_deg"] += np.degrees(st.va).tolist()
    return {
        k: {"mean": math.fsum(v) / len(v), "median": statistics.median(v)} if v else
           {"mean": None, "median": None}
        for k, v in fields.items()
    }


def generate_dataset(topo: TopologyParams, supply: SupplyParams, count: int, out_dir,
                     name: str = "synthetic", fractions=(0.8, 0.1, 0.1), workers: int = 1,
                     nr_opts: NrOptions | None = None) -> GenReport:
    """Write ``count`` unsolved cases plus Newton-Raphson solutions to ``out_dir``."""
    report = GenReport()
    window: deque[bool] = deque(maxlen=1000)
    accepted: list[tuple[Network, object]] = []

    def records():
        for outcome in iter_cases(topo, supply, count, workers, nr_opts):
            window.extend([False] * (outcome.attempts - 1) + [True])
            if len(window) == window.maxlen and sum(window) < 10:
                raise GenerationStalled(len(window), sum(window))
            report.attempted += outcome.attempts
            report.accepted += 1
            report.nr_failures += outcome.nr_failures
            report.band_rejections += outcome.band_rejections
            accepted.append((outcome.net, outcome.solution))
            yield (from_solution(outcome.net, flat_state(outcome.net)),
                   from_solution(outcome.net, outcome.solution))

    manifest = DatasetManifest(
        name=name,
        case_count=count,
        split=split_counts(count, fractions),
        seed=int(supply.seed),
        generator_params=params_to_dict(topo, supply),
        solved=True,
    )
    write_dataset(out_dir, manifest, records())
    report.stats = dataset_stats(accepted)
    Path(out_dir, "gen_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return report
