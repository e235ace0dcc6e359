"""Accuracy tables, flat-start baseline and runtime scaling at desk scale.

Every aggregate written here is backed by per-case (or per-repetition)
records that are persisted next to it, so the summaries can be recomputed.
"""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, NumericError
from .loss import evaluate
from .model import ModelConfig, infer_many
from .network import Network, build_ybus, flat_state
from .nr import NrOptions, solve_nr
from .synth import SupplyParams, TopologyParams, generate_case, load_params

log = logging.getLogger(__name__)

METHODS = ("flat", "gnn", "nr", "nr_dense", "nr_sparse")
ACCURACY_HEADER = ["dataset", "method", "mean_mva", "median_mva", "n"]
RUNTIME_HEADER = ["bucket", "method", "mean_s", "median_s", "n", "se_s", "mean_buses"]
CPU_NOTE = ("CPU run: the batched model is compared to Newton-Raphson by the slope "
            "of a log-log fit of time against grid size, not by absolute constancy.")


@dataclass(frozen=True)
class BenchConfig:
    size_buckets: tuple[int, ...] = (20, 50, 100, 200, 300, 500)
    cases_per_bucket: int = 50
    repetitions: int = 3
    methods: tuple[str, ...] = ("gnn", "nr")
    seed: int = 0
    min_buses: int = 5
    # mean size of the default training grids; larger buckets get their
    # loads and line lengths shrunk by reference_size / bucket size
    reference_size: float = 17.5

    def __post_init__(self):
        object.__setattr__(self, "size_buckets", tuple(int(b) for b in self.size_buckets))
        object.__setattr__(self, "methods", tuple(self.methods))
        b = self.size_buckets
        if not b or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("size_buckets must be non-empty and strictly increasing")
        if b[0] < self.min_buses:
            raise ValueError("first bucket is smaller than min_buses")
        if self.cases_per_bucket < 1 or self.repetitions < 1:
            raise ValueError("cases_per_bucket and repetitions must be at least 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    def bucket_ranges(self) -> list[tuple[int, int]]:
        lows = [self.min_buses] + [b + 1 for b in self.size_buckets[:-1]]
        return list(zip(lows, self.size_buckets))


# --- statistics --------------------------------------------------------------

def standard_error(samples: Sequence[float]) -> float:
    """Standard error of the mean; 0 for fewer than two samples."""
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(size)."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def _mean_median(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return float("nan"), float("nan")
    return math.fsum(vals) / len(vals), float(statistics.median(vals))


# --- accuracy ------------------------------------------------------------------

@dataclass(frozen=True)
class CaseRecord:
    dataset: str
    method: str
    case: int
    n_bus: int
    loss_per_node_mva: float
    wall_time: float
    ok: bool = True


@dataclass(frozen=True)
class AccuracyRow:
    dataset: str
    method: str
    mean_mva: float
    median_mva: float
    n: int


def flat_baseline(cases: Sequence[Network]) -> tuple[float, float]:
    """Mean and median loss per node (MVA) of the flat start."""
    if not cases:
        raise EmptyDataset("flat baseline needs at least one case")
    return _mean_median([evaluate(net, flat_state(net)).per_node_mva for net in cases])


def _nr_record(dataset, method, idx, net, opts) -> CaseRecord:
    t0 = time.perf_counter()
    try:
        ybus = build_ybus(net)
        state, _ = solve_nr(net, flat_state(net), opts, ybus)
    except NumericError:
        return CaseRecord(dataset, method, idx, net.n_bus, float("nan"),
                          time.perf_counter() - t0, ok=False)
    wall = time.perf_counter() - t0
    return CaseRecord(dataset, method, idx, net.n_bus, evaluate(net, state, ybus).per_node_mva, wall)


def accuracy_records(cases: Sequence[Network], methods: Sequence[str] = ("flat", "gnn", "nr"),
                     model=None, nr_opts: NrOptions | None = None, dataset: str = "test",
                     rng: np.random.Generator | None = None) -> list[CaseRecord]:
    """Per-case loss per node for each method, in method then case order."""
    nr_opts = nr_opts or NrOptions()
    records: list[CaseRecord] = []
    for method in methods:
        if method == "flat":
            for i, net in enumerate(cases):
                t0 = time.perf_counter()
                loss = evaluate(net, flat_state(net)).per_node_mva
                records.append(CaseRecord(dataset, method, i, net.n_bus, loss,
                                          time.perf_counter() - t0))
        elif method == "gnn":
            if model is None:
                raise ValueError("method 'gnn' needs a model")
            params, cfg = model
            gen = rng if rng is not None else np.random.default_rng(cfg.seed)
            t0 = time.perf_counter()
            results = infer_many(list(cases), params, cfg, gen)
            share = (time.perf_counter() - t0) / max(len(cases), 1)
            for i, (net, res) in enumerate(zip(cases, results)):
                records.append(CaseRecord(dataset, method, i, net.n_bus,
                                          res.report.per_node_mva, share))
        else:
            opts = _nr_variant(method, nr_opts)
            records += [_nr_record(dataset, method, i, net, opts) for i, net in enumerate(cases)]
    return records


def summarize_accuracy(records: Sequence[CaseRecord]) -> list[AccuracyRow]:
    """One row per (dataset, method) in first-seen order; n counts finite losses."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.dataset, r.method), []).append(r.loss_per_node_mva)
    rows = []
    for (ds, method), losses in groups.items():
        mean, median = _mean_median(losses)
        rows.append(AccuracyRow(ds, method, mean, median,
                                sum(1 for v in losses if math.isfinite(v))))
    return rows


def eval_accuracy(cases: Sequence[Network], model=None, nr_opts: NrOptions | None = None,
                  methods: Sequence[str] = ("flat", "gnn", "nr"), dataset: str = "test",
                  rng: np.random.Generator | None = None):
    """Returns (summary rows, per-case records)."""
    records = accuracy_records(cases, methods, model, nr_opts, dataset, rng)
    return summarize_accuracy(records), records


def write_accuracy(out_dir, rows: Sequence[AccuracyRow], records: Sequence[CaseRecord]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "accuracy.csv", ACCURACY_HEADER,
               [[r.dataset, r.method, repr(r.mean_mva), repr(r.median_mva), r.n] for r in rows])
    _write_csv(out / "accuracy_cases.csv",
               ["dataset", "method", "case", "n_bus", "loss_per_node_mva", "wall_time", "ok"],
               [[r.dataset, r.method, r.case, r.n_bus, repr(r.loss_per_node_mva),
                 repr(r.wall_time), int(r.ok)] for r in records])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- runtime -------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRecord:
    bucket: int
    method: str
    repetition: int
    seconds: float
    n_cases: int
    n_buses: int


@dataclass(frozen=True)
class RuntimeRow:
    bucket: int
    method: str
    mean_s: float
    median_s: float
    n: int
    se_s: float
    mean_buses: float


@dataclass
class BenchResult:
    rows: list[RuntimeRow]
    records: list[TimingRecord]
    slopes: dict[str, float] = field(default_factory=dict)
    note: str = CPU_NOTE

    def row(self, method: str, bucket: int) -> RuntimeRow:
        for r in self.rows:
            if r.method == method and r.bucket == bucket:
                return r
        raise KeyError((method, bucket))

    def series(self, method: str) -> list[RuntimeRow]:
        return [r for r in self.rows if r.method == method]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "slopes": self.slopes, "note": self.note}


def scaled_params(topo: TopologyParams, supply: SupplyParams, lo: int, hi: int,
                  reference_size: float) -> tuple[TopologyParams, SupplyParams]:
    """Generator settings for a size bucket.

    Voltage drop along a feeder grows with both its load and its length, so
    big grids drawn with small-grid settings almost never stay inside the
    voltage band. Injections and segment lengths are shrunk by the ratio of
    the reference size to the bucket's mean size.
    """
    f = min(1.0, reference_size / ((lo + hi) / 2.0))
    scale = lambda r: (r[0] * f, r[1] * f)
    topo = replace(topo, n_buses=(lo, hi), segment_length_km=scale(topo.segment_length_km))
    supply = replace(supply, pq_load_p_range=scale(supply.pq_load_p_range),
                     pq_load_q_range=scale(supply.pq_load_q_range),
                     pv_gen_p_range=scale(supply.pv_gen_p_range))
    return topo, supply


def bucket_cases(cfg: BenchConfig, lo: int, hi: int, topo: TopologyParams | None = None,
                 supply: SupplyParams | None = None) -> list[Network]:
    if topo is None or supply is None:
        topo, supply = load_params()
    topo, supply = scaled_params(topo, supply, lo, hi, cfg.reference_size)
    supply = replace(supply, seed=int(np.random.SeedSequence([cfg.seed, hi]).generate_state(1)[0]))
    return [generate_case(topo, supply, i).net for i in range(cfg.cases_per_bucket)]


def _nr_variant(method: str, opts: NrOptions) -> NrOptions:
    solver = {"nr": opts.linear_solver, "nr_dense": "dense", "nr_sparse": "sparse"}[method]
    return replace(opts, linear_solver=solver)


def _time_method(method: str, nets: Sequence[Network], model, nr_opts: NrOptions) -> float:
    if method == "gnn":
        params, mcfg = model
        total = sum(n.n_bus for n in nets)
        rng = np.random.default_rng(mcfg.seed)
        t0 = time.perf_counter()
        # graph rewrite, one batched forward over every grid, candidate selection
        infer_many(nets, params, mcfg, rng, restarts=1, chunk_buses=total + 1)
        return time.perf_counter() - t0
    if method == "flat":
        t0 = time.perf_counter()
        for net in nets:
            evaluate(net, flat_state(net))
        return time.perf_counter() - t0
    opts = _nr_variant(method, nr_opts)
    t0 = time.perf_counter()
    for net in nets:
        solve_nr(net, flat_state(net), opts, build_ybus(net))
    return time.perf_counter() - t0


def bench_runtime(cfg: BenchConfig, model=None, nr_opts: NrOptions | None = None,
                  topo: TopologyParams | None = None, supply: SupplyParams | None = None,
                  cases: dict[int, list[Network]] | None = None) -> BenchResult:
    """Wall-clock time to solve each bucket's grids, per method.

    One repetition solves all grids of a bucket: the model as a single batch,
    Newton-Raphson case by case. An untimed warm-up run precedes each bucket.
    """
    nr_opts = nr_opts or NrOptions()
    if "gnn" in cfg.methods and model is None:
        raise ValueError("method 'gnn' needs a model")
    records: list[TimingRecord] = []
    rows: list[RuntimeRow] = []
    for lo, hi in cfg.bucket_ranges():
        nets = cases[hi] if cases and hi in cases else bucket_cases(cfg, lo, hi, topo, supply)
        n_buses = sum(n.n_bus for n in nets)
        for method in cfg.methods:
            _time_method(method, nets[:1], model, nr_opts)
            times = []
            for rep in range(cfg.repetitions):
                sec = _time_method(method, nets, model, nr_opts)
                times.append(sec)
                records.append(TimingRecord(hi, method, rep, sec, len(nets), n_buses))
            rows.append(RuntimeRow(hi, method, math.fsum(times) / len(times),
                                   float(statistics.median(times)), len(nets),
                                   standard_error(times), n_buses / len(nets)))
            log.info("bucket %d %s %.4fs", hi, method, rows[-1].mean_s)
    slopes = {}
    for method in cfg.methods:
        series = [r for r in rows if r.method == method]
        slopes[method] = loglog_slope([r.mean_buses for r in series], [r.mean_s for r in series])
    return BenchResult(rows, records, slopes)


def write_runtime(out_dir, result: BenchResult, plot: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "runtime.csv", RUNTIME_HEADER,
               [[r.bucket, r.method, repr(r.mean_s), repr(r.median_s), r.n, repr(r.se_s),
                 repr(r.mean_buses)] for r in result.rows])
    _write_csv(out / "runtime_reps.csv",
               ["bucket", "method", "repetition", "seconds", "n_cases", "n_buses"],
               [[t.bucket, t.method, t.repetition, repr(t.seconds), t.n_cases, t.n_buses]
                for t in result.records])
    _write_csv(out / "runtime_slopes.csv", ["method", "loglog_slope", "note"],
               [[m, repr(s), result.note] for m, s in result.slopes.items()])
    if plot:
        plot_runtime(result, out / "runtime.svg")


def plot_runtime(result: BenchResult, path) -> None:
    """SVG line chart of time against bucket size (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in dict.fromkeys(r.method for r in result.rows):
        series = result.series(method)
        ax.plot([r.bucket for r in series], [r.mean_s for r in series], marker="o",
                label=f"{method} (slope {result.slopes.get(method, float('nan')):.2f})")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("max buses per grid")
    ax.set_ylabel("seconds per bucket")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
