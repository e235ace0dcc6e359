from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import pytest

from conftest import four_bus, two_bus
from pfgnn.casefile import document_from_network, read_case, to_network, write_case
from pfgnn.cli import DEFAULTS, LOCK_NAME, UsageError, main, resolve_config
from pfgnn.network import flat_state


def _case(tmp_path, net, name="case.json") -> str:
    path = tmp_path / name
    write_case(path, document_from_network(net))
    return str(path)


def _error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_solve_nr_zero_load(tmp_path, capsys):
    case = _case(tmp_path, two_bus(p=0.0, q=0.0))
    assert main(["solve-nr", "--case", case]) == 0
    out = capsys.readouterr().out
    (tmp_path / "sol.json").write_text(out)
    net = to_network(read_case(case))
    from pfgnn.casefile import state_from_case

    state = state_from_case(read_case(tmp_path / "sol.json"), net)
    flat = flat_state(net)
    assert abs(state.vm - flat.vm).max() <= 1e-12
    assert abs(state.va - flat.va).max() <= 1e-12


def test_solve_then_loss(tmp_path, capsys):
    case = _case(tmp_path, four_bus())
    out = tmp_path / "nr"
    assert main(["solve-nr", "--case", case, "--out", str(out)]) == 0
    report = json.loads((out / "nr_report.json").read_text())
    assert report["iterations"] >= 1
    assert main(["loss", "--case", case, "--state", str(out / "solution.json")]) == 0
    loss = json.loads(capsys.readouterr().out)
    assert loss["per_node_mva"] <= 1e-4


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert _error(capsys)["exit_code"] == 1
    assert main(["solve-nr"]) == 1
    assert "--case" in _error(capsys)["message"]
    assert main(["solve-nr", "--case", "x", "--bogus"]) == 1
    capsys.readouterr()
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert main(["solve-nr", "--case", str(bad)]) == 2
    assert _error(capsys)["exit_code"] == 2
    assert main(["solve-nr", "--case", str(tmp_path / "missing.json")]) == 2
    capsys.readouterr()
    diverging = _case(tmp_path, two_bus(p=-100.0, x=1.0), "div.json")
    assert main(["solve-nr", "--case", diverging]) == 3
    err = _error(capsys)
    assert err["exit_code"] == 3 and err["error"] in ("Diverged", "SingularJacobian")


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"count": 7, "seed": 3}))
    cfg = resolve_config("gen-dataset", {"config": str(cfg_file), "seed": 9}, environ={})
    assert (cfg["count"], cfg["seed"], cfg["name"]) == (7, 9, DEFAULTS["gen-dataset"]["name"])
    env_cfg = resolve_config("gen-dataset", {}, environ={"PFGNN_CONFIG": str(cfg_file)})
    assert env_cfg["count"] == 7
    cfg_file.write_text(json.dumps({"counts": 7}))
    with pytest.raises(UsageError):
        resolve_config("gen-dataset", {"config": str(cfg_file)}, environ={})
    cfg_file.write_text(json.dumps({"command": "train"}))
    with pytest.raises(UsageError):
        resolve_config("gen-dataset", {"config": str(cfg_file)}, environ={})


def _gen(out, *extra):
    return main(["gen-dataset", "--count", "10", "--seed", "7", "--n-min", "5", "--n-max", "8",
                 "--threads", "1", "--out", str(out), *extra])


def test_gen_dataset_deterministic_and_lock(tmp_path):
    assert _gen(tmp_path / "a") == 0
    assert _gen(tmp_path / "b") == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    lock = json.loads((tmp_path / "a" / LOCK_NAME).read_text())
    assert lock["command"] == "gen-dataset" and lock["seed"] == 7 and "out" not in lock
    # the lock file alone reproduces the run
    assert main(["gen-dataset", "--config", str(tmp_path / "a" / LOCK_NAME),
                 "--out", str(tmp_path / "c")]) == 0
    assert _digest(tmp_path / "c") == _digest(tmp_path / "a")
    # nothing is written outside the output directories
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a", "b", "c"]


def test_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert _gen(data) == 0
    model_dir = tmp_path / "model"
    assert main(["train", "--dataset", str(data), "--out", str(model_dir), "--epochs", "2",
                 "--d", "4", "--iterations", "2", "--batch-size", "4"]) == 0
    log = list(csv.reader(open(model_dir / "training_log.csv")))
    assert len(log) == 3
    ckpt = str(model_dir / "model.ckpt")
    tuned = tmp_path / "tuned"
    assert main(["fine-tune", "--model", ckpt, "--dataset", str(data), "--out", str(tuned),
                 "--epochs", "1", "--split", "validation"]) == 0
    assert (tuned / "model.ckpt").exists()

    case = data / "cases" / "000000.json"
    inf = tmp_path / "inf"
    assert main(["infer", "--model", ckpt, "--case", str(case), "--out", str(inf),
                 "--restarts", "2", "--iterations", "3"]) == 0
    summary = json.loads((inf / "inference.json").read_text())
    assert summary["candidates"] == 6

    ev = tmp_path / "eval"
    assert main(["eval", "--dataset", str(data), "--model", ckpt, "--split", "all",
                 "--out", str(ev)]) == 0
    rows = list(csv.reader(open(ev / "accuracy.csv")))
    assert [r[1] for r in rows[1:]] == ["flat", "gnn", "nr"]
    assert float(rows[3][2]) <= 1e-4

    bench_dir = tmp_path / "bench"
    assert main(["bench", "--model", ckpt, "--buckets", "10", "20", "--cases-per-bucket", "2",
                 "--repetitions", "1", "--out", str(bench_dir)]) == 0
    assert len(list(csv.reader(open(bench_dir / "runtime.csv")))) == 1 + 4
    assert main(["bench", "--out", str(tmp_path / "b2")]) == 1
    capsys.readouterr()


def test_gradcheck_command(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out", str(out), "--iterations", "2"]) == 0
    res = json.loads((out / "gradcheck.json").read_text())
    assert res["max_rel_error"] <= 1e-6
    assert main(["gradcheck", "--out", str(out), "--tolerance", "0"]) == 3
