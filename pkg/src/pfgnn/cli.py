"""Command-line entry point: ``pfgnn <subcommand> [flags]``.

Settings come from built-in defaults, then an optional JSON config file
(``--config`` or the ``PFGNN_CONFIG`` environment variable), then flags. The
effective settings are written to ``config.lock.json`` in the output
directory; passing that file back as ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench
from .casefile import (
    from_solution,
    read_case,
    read_dataset,
    serialize_case,
    state_from_case,
    to_network,
    write_case,
)
from .errors import DataError, NumericError
from .loss import evaluate
from .model import (
    ModelConfig,
    fine_tune,
    infer_many,
    init_params,
    load_model,
    model_gradcheck,
    save_model,
    train,
    write_training_log,
)
from .network import flat_state
from .nr import NrOptions, solve_nr
from .synth import generate_case, generate_dataset, load_params, params_from_dict

log = logging.getLogger("pfgnn.cli")

CONFIG_ENV = "PFGNN_CONFIG"
LOCK_NAME = "config.lock.json"

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# defaults per subcommand; every key is also a flag (dashes for underscores)
DEFAULTS: dict[str, dict] = {
    "gen-dataset": {"count": 100, "seed": 0, "params": None, "n_min": None, "n_max": None,
                    "name": "synthetic", "split": [0.8, 0.1, 0.1], "threads": None},
    "solve-nr": {"case": None, "tol": 1e-8, "max_iter": 30, "linear_solver": "auto"},
    "loss": {"case": None, "state": None},
    "train": {"dataset": None, "epochs": 10, "seed": 0, "d": 150, "iterations": 30,
              "learning_rate": 1e-3, "batch_size": 16, "objective": "mean", "split": "train"},
    "fine-tune": {"model": None, "dataset": None, "epochs": 10, "seed": 0, "split": "train",
                  "learning_rate": None},
    "infer": {"model": None, "case": None, "seed": 0, "restarts": None, "iterations": None},
    "eval": {"dataset": None, "model": None, "split": "test", "methods": ["flat", "gnn", "nr"],
             "seed": 0, "tol": 1e-8, "max_iter": 30},
    "bench": {"model": None, "buckets": [20, 50, 100, 200, 300, 500], "cases_per_bucket": 50,
              "repetitions": 3, "methods": ["gnn", "nr"], "seed": 0, "plot": False,
              "tol": 1e-8, "max_iter": 30},
    "gradcheck": {"seed": 0, "d": 4, "iterations": 3, "tolerance": 1e-6},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def command(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=S)
        p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
        p.add_argument("--out", help="output directory; nothing is written elsewhere")
        return p

    p = command("gen-dataset", "generate a synthetic solved dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--params", help="generator parameter JSON (default: bundled MV set)")
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--name")
    p.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "TEST", "VAL"))
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")

    p = command("solve-nr", "solve one case with Newton-Raphson")
    p.add_argument("--case")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--linear-solver", choices=["auto", "dense", "sparse"])

    p = command("loss", "physics loss of a state on a case")
    p.add_argument("--case")
    p.add_argument("--state", help="case file whose VM/VA/PG/QG hold the state")

    p = command("train", "train a fresh model on a dataset")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=["train", "test", "validation", "all"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--objective", choices=["mean", "final"])

    p = command("fine-tune", "continue training a model on another dataset")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=["train", "test", "validation", "all"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)

    p = command("infer", "best-of-N model solution for one case")
    p.add_argument("--model")
    p.add_argument("--case")
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--iterations", type=int)

    p = command("eval", "accuracy table for flat start, model and Newton-Raphson")
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--split", choices=["train", "test", "validation", "all"])
    p.add_argument("--methods", nargs="+", choices=list(bench.METHODS))
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)

    p = command("bench", "runtime scaling over grid-size buckets")
    p.add_argument("--model")
    p.add_argument("--buckets", type=int, nargs="+")
    p.add_argument("--cases-per-bucket", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--methods", nargs="+", choices=list(bench.METHODS))
    p.add_argument("--seed", type=int)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)

    p = command("gradcheck", "finite-difference check of every op and the model")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tolerance", type=float)
    return parser


def resolve_config(command: str, flags: dict, environ=None) -> dict:
    """Merge defaults, the config file and explicit flags (flags win)."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None) or environ.get(CONFIG_ENV)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        other = file_cfg.pop("command", command)
        if other != command:
            raise UsageError(f"config {path} was written for '{other}', not '{command}'")
        unknown = set(file_cfg) - set(cfg) - {"out"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(flags)
    cfg.setdefault("out", None)
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required setting(s): {flags}")


def _out_dir(cfg: dict, command: str) -> Path | None:
    if cfg.get("out") is None:
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    # the output location itself is not part of the recipe
    lock = {"command": command, **{k: v for k, v in cfg.items() if k != "out"}}
    (out / LOCK_NAME).write_text(json.dumps(lock, sort_keys=True, indent=2) + "\n",
                                 encoding="utf-8")
    return out


def _emit_json(obj, out: Path | None, name: str) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text, encoding="utf-8")


def _nets(dataset: str, split: str):
    _, records = read_dataset(dataset, None if split == "all" else split)
    return [to_network(r.case) for r in records]


def _generator_params(cfg: dict):
    if cfg["params"]:
        try:
            obj = json.loads(Path(cfg["params"]).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read params {cfg['params']}: {exc.strerror}") from None
        topo, supply = params_from_dict(obj)
    else:
        topo, supply = load_params()
    lo, hi = topo.n_buses
    topo = replace(topo, n_buses=(cfg["n_min"] or lo, cfg["n_max"] or hi))
    return topo, replace(supply, seed=cfg["seed"])


# --- subcommands -------------------------------------------------------------

def cmd_gen_dataset(cfg: dict) -> int:
    _require(cfg, "out")
    topo, supply = _generator_params(cfg)
    out = _out_dir(cfg, "gen-dataset")
    workers = cfg["threads"] or os.cpu_count() or 1
    report = generate_dataset(topo, supply, cfg["count"], out, cfg["name"],
                              tuple(cfg["split"]), workers=workers)
    log.info("generated %d cases in %d attempts", report.accepted, report.attempted)
    return 0


def cmd_solve_nr(cfg: dict) -> int:
    _require(cfg, "case")
    out = _out_dir(cfg, "solve-nr")
    net = to_network(read_case(cfg["case"]))
    opts = NrOptions(cfg["tol"], cfg["max_iter"], cfg["linear_solver"])
    state, report = solve_nr(net, flat_state(net), opts)
    doc = from_solution(net, state)
    if out is None:
        sys.stdout.write(serialize_case(doc))
    else:
        write_case(out / "solution.json", doc)
        _emit_json(report.to_dict(), out, "nr_report.json")
    log.info("converged in %d iterations, mismatch %.3g", report.iterations, report.final_mismatch)
    return 0


def cmd_loss(cfg: dict) -> int:
    _require(cfg, "case", "state")
    out = _out_dir(cfg, "loss")
    net = to_network(read_case(cfg["case"]))
    state = state_from_case(read_case(cfg["state"]), net)
    report = evaluate(net, state)
    _emit_json(report.to_dict(), out, "loss.json")
    log.info("loss per node %.6g MVA", report.per_node_mva)
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    nets = _nets(cfg["dataset"], cfg["split"])
    out = _out_dir(cfg, "train")
    mcfg = ModelConfig(d=cfg["d"], iterations_train=cfg["iterations"],
                       iterations_infer=cfg["iterations"], learning_rate=cfg["learning_rate"],
                       batch_size=cfg["batch_size"], objective=cfg["objective"],
                       seed=cfg["seed"])
    params = init_params(mcfg, np.random.default_rng(mcfg.seed), nets)
    params, history = train(nets, params, mcfg, cfg["epochs"],
                            rng=np.random.default_rng(mcfg.seed + 1))
    save_model(out / "model.ckpt", params, mcfg)
    write_training_log(out / "training_log.csv", history)
    return 0


def cmd_fine_tune(cfg: dict) -> int:
    _require(cfg, "model", "dataset", "out")
    params, mcfg = load_model(cfg["model"])
    if cfg["learning_rate"] is not None:
        mcfg = replace(mcfg, learning_rate=cfg["learning_rate"])
    nets = _nets(cfg["dataset"], cfg["split"])
    out = _out_dir(cfg, "fine-tune")
    history = []
    tuned = fine_tune(params, nets, mcfg, cfg["epochs"],
                      rng=np.random.default_rng(cfg["seed"] + 1), callback=history.append)
    save_model(out / "model.ckpt", tuned, mcfg)
    write_training_log(out / "training_log.csv", history)
    return 0


def cmd_infer(cfg: dict) -> int:
    _require(cfg, "model", "case")
    params, mcfg = load_model(cfg["model"])
    out = _out_dir(cfg, "infer")
    net = to_network(read_case(cfg["case"]))
    res = infer_many([net], params, mcfg, np.random.default_rng(cfg["seed"]),
                     restarts=cfg["restarts"], iterations=cfg["iterations"])[0]
    summary = {"iteration": res.iteration, "restart": res.restart,
               "candidates": res.n_candidates, "loss": res.report.to_dict()}
    if out is None:
        sys.stdout.write(serialize_case(from_solution(net, res.state)))
    else:
        write_case(out / "solution.json", from_solution(net, res.state))
        _emit_json(summary, out, "inference.json")
    log.info("best of %d candidates: %.6g MVA per node", res.n_candidates,
             res.report.per_node_mva)
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    methods = list(cfg["methods"])
    model = load_model(cfg["model"]) if cfg.get("model") else None
    if "gnn" in methods and model is None:
        raise UsageError("method gnn needs --model")
    nets = _nets(cfg["dataset"], cfg["split"])
    out = _out_dir(cfg, "eval")
    rows, records = bench.eval_accuracy(
        nets, model, NrOptions(cfg["tol"], cfg["max_iter"]), methods,
        dataset=Path(cfg["dataset"]).name, rng=np.random.default_rng(cfg["seed"]))
    bench.write_accuracy(out, rows, records)
    for r in rows:
        log.info("%s %s mean %.6g median %.6g MVA (n=%d)", r.dataset, r.method, r.mean_mva,
                 r.median_mva, r.n)
    return 0


def cmd_bench(cfg: dict) -> int:
    _require(cfg, "out")
    methods = list(cfg["methods"])
    model = load_model(cfg["model"]) if cfg.get("model") else None
    if "gnn" in methods and model is None:
        raise UsageError("method gnn needs --model")
    out = _out_dir(cfg, "bench")
    bcfg = bench.BenchConfig(size_buckets=cfg["buckets"], cases_per_bucket=cfg["cases_per_bucket"],
                             repetitions=cfg["repetitions"], methods=methods, seed=cfg["seed"])
    result = bench.bench_runtime(bcfg, model, NrOptions(cfg["tol"], cfg["max_iter"]))
    bench.write_runtime(out, result, plot=cfg["plot"])
    for m, s in result.slopes.items():
        log.info("%s log-log slope %.3f", m, s)
    log.info("%s", result.note)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    out = _out_dir(cfg, "gradcheck")
    rng = np.random.default_rng(cfg["seed"])
    ops = ad.op_gradchecks(rng)
    topo, supply = load_params()
    # a 5-bus case with every bus type, so each per-type cell is exercised
    supply = replace(supply, seed=cfg["seed"], pv_node_fraction=0.5)
    topo = replace(topo, n_buses=(5, 5))
    net = next(n for n in (generate_case(topo, supply, i).net for i in range(1000))
               if len(set(n.bus_types.tolist())) == 3)
    model = model_gradcheck(net, ModelConfig(d=cfg["d"], iterations_train=cfg["iterations"],
                                             seed=cfg["seed"]), rng)
    worst = max(list(ops.values()) + list(model.values()))
    _emit_json({"ops": ops, "model": model, "max_rel_error": worst,
                "tolerance": cfg["tolerance"]}, out, "gradcheck.json")
    if worst > cfg["tolerance"]:
        raise NumericError(f"gradient check failed: max relative error {worst:.3g}")
    log.info("max relative error %.3g", worst)
    return 0


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "solve-nr": cmd_solve_nr,
    "loss": cmd_loss,
    "train": cmd_train,
    "fine-tune": cmd_fine_tune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = vars(_build_parser().parse_args(argv))
        verbose = args.pop("verbose", False)
        command = args.pop("command", None)
        if command is None:
            raise UsageError("pfgnn: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        log.setLevel(logging.INFO)
        cfg = resolve_config(command, args)
        return COMMANDS[command](cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "UsageError", str(exc))
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
