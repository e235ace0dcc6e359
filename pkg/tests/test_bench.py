from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import two_bus
from pfgnn.bench import (
    ACCURACY_HEADER,
    RUNTIME_HEADER,
    BenchConfig,
    bench_runtime,
    bucket_cases,
    eval_accuracy,
    flat_baseline,
    loglog_slope,
    scaled_params,
    standard_error,
    summarize_accuracy,
    write_accuracy,
    write_runtime,
)
from pfgnn.errors import EmptyDataset
from pfgnn.model import ModelConfig, init_params
from pfgnn.loss import evaluate
from pfgnn.synth import load_params

TINY = ModelConfig(d=8, iterations_train=2, iterations_infer=3, restarts_infer=2)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_validation():
    assert BenchConfig().bucket_ranges()[:2] == [(5, 20), (21, 50)]
    with pytest.raises(ValueError):
        BenchConfig(size_buckets=(50, 20))
    with pytest.raises(ValueError):
        BenchConfig(methods=("gnn", "magic"))
    with pytest.raises(ValueError):
        BenchConfig(size_buckets=(3,))


def test_standard_error_shrinks_by_root_two():
    # doubling the sample count divides the standard error by sqrt(2), not 2
    rng = np.random.default_rng(0)
    ratios = [standard_error(rng.normal(size=20)) for _ in range(4000)]
    doubled = [standard_error(rng.normal(size=40)) for _ in range(4000)]
    ratio = np.mean(doubled) / np.mean(ratios)
    assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.03)
    assert standard_error([1.0]) == 0.0
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)


def test_loglog_slope():
    sizes = np.array([10, 20, 40, 80])
    assert loglog_slope(sizes, 3 * sizes ** 1.5) == pytest.approx(1.5)
    assert math.isnan(loglog_slope([10], [1.0]))


def test_flat_baseline_examples(small_cases):
    assert flat_baseline([two_bus(p=0.0, q=0.0)]) == (0.0, 0.0)
    nets = [o.net for o in small_cases]
    mean, median = flat_baseline(nets)
    assert mean > 0 and median > 0
    assert flat_baseline(nets) == (mean, median)
    # the same statistic taken at the solved states instead of the flat start
    solved = [evaluate(o.net, o.solution).per_node_mva for o in small_cases]
    assert max(solved) <= 1e-4
    with pytest.raises(EmptyDataset):
        flat_baseline([])


def test_empty_method_list_writes_header_only(tmp_path, small_cases):
    rows, records = eval_accuracy([o.net for o in small_cases[:3]], methods=())
    write_accuracy(tmp_path, rows, records)
    assert _rows(tmp_path / "accuracy.csv") == [ACCURACY_HEADER]


def test_accuracy_ordering_and_records(tmp_path, small_cases):
    nets = [o.net for o in small_cases[:6]]
    model = (init_params(TINY, np.random.default_rng(0)), TINY)
    rows, records = eval_accuracy(nets, model, methods=("flat", "gnn", "nr", "nr_sparse"),
                                  rng=np.random.default_rng(0))
    by = {r.method: r for r in rows}
    assert by["nr"].mean_mva <= 1e-4 and by["nr_sparse"].mean_mva <= 1e-4
    assert by["nr"].mean_mva <= by["flat"].mean_mva
    assert all(r.n == len(nets) for r in rows)
    # summaries are recomputable from the per-case records
    assert summarize_accuracy(records) == rows
    write_accuracy(tmp_path, rows, records)
    table = _rows(tmp_path / "accuracy.csv")
    cases = _rows(tmp_path / "accuracy_cases.csv")
    assert len(table) == 1 + 4 and len(cases) == 1 + 4 * len(nets)
    flat = [float(r[4]) for r in cases[1:] if r[1] == "flat"]
    assert float(table[1][2]) == pytest.approx(math.fsum(flat) / len(flat), rel=0, abs=0)


def test_nr_failure_recorded_not_raised():
    bad = two_bus(p=-100.0, x=1.0)
    rows, records = eval_accuracy([bad], methods=("nr",))
    assert records[0].ok is False and math.isnan(records[0].loss_per_node_mva)
    assert rows[0].n == 0


def test_scaled_params():
    topo, supply = load_params()
    t, s = scaled_params(topo, supply, 5, 20, 17.5)
    assert t.segment_length_km == topo.segment_length_km and t.n_buses == (5, 20)
    t, s = scaled_params(topo, supply, 201, 300, 17.5)
    f = 17.5 / 250.5
    assert s.pq_load_p_range[1] == pytest.approx(supply.pq_load_p_range[1] * f)
    assert t.segment_length_km[1] == pytest.approx(topo.segment_length_km[1] * f)


def test_bucket_cases_sizes_and_determinism():
    cfg = BenchConfig(size_buckets=(20, 50), cases_per_bucket=4)
    a = bucket_cases(cfg, 21, 50)
    assert all(21 <= n.n_bus <= 50 for n in a)
    assert a == bucket_cases(cfg, 21, 50)


def test_single_bucket_single_case(tmp_path):
    cfg = BenchConfig(size_buckets=(20,), cases_per_bucket=1, repetitions=2,
                      methods=("gnn", "nr", "flat"))
    model = (init_params(TINY, np.random.default_rng(0)), TINY)
    res = bench_runtime(cfg, model)
    assert len(res.rows) == 3
    for row in res.rows:
        assert row.n == 1 and math.isfinite(row.mean_s) and row.mean_s > 0
    assert len(res.records) == 3 * 2
    write_runtime(tmp_path, res)
    table = _rows(tmp_path / "runtime.csv")
    assert table[0] == RUNTIME_HEADER and len(table) == 4
    reps = _rows(tmp_path / "runtime_reps.csv")
    nr_reps = [float(r[3]) for r in reps[1:] if r[1] == "nr"]
    assert float(table[2][2]) == pytest.approx(math.fsum(nr_reps) / 2)
    assert "log-log" in _rows(tmp_path / "runtime_slopes.csv")[1][2]


def test_gnn_needs_model():
    with pytest.raises(ValueError):
        bench_runtime(BenchConfig(size_buckets=(20,), cases_per_bucket=1))


def test_runtime_plot(tmp_path):
    pytest.importorskip("matplotlib")
    cfg = BenchConfig(size_buckets=(10, 20), cases_per_bucket=2, repetitions=1,
                      methods=("nr", "flat"))
    res = bench_runtime(cfg)
    write_runtime(tmp_path, res, plot=True)
    assert (tmp_path / "runtime.svg").read_text().lstrip().startswith("<?xml")
    assert set(res.slopes) == {"nr", "flat"}
