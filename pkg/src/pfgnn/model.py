"""Randomized recurrent message-passing solver trained on the power-balance loss.

The electrical graph is rewritten into a bipartite graph whose nodes are the
buses and the branches; every electrical incidence gives one arc in each
direction. Bus and branch nodes carry LSTM states that are refined for a
number of iterations, and after every iteration the bus states are decoded
into a candidate (P, Q, V, theta). Specified values are clamped, so only the
legitimate unknowns are ever learned.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .errors import EmptyDataset
from .loss import LossReport, calc_injections, evaluate
from .network import (
    AdmittanceMatrix,
    BusType,
    GridState,
    Network,
    VA,
    VM,
    build_ybus,
    disjoint_union,
    flat_state,
)

log = logging.getLogger(__name__)

N_BUS_FEATURES = 9
N_BRANCH_FEATURES = 2


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian mixture added to unknown start values (per-unit / radians)."""

    weights: tuple[float, ...] = (0.5, 0.5)
    means: tuple[float, ...] = (-0.1, 0.1)
    stds: tuple[float, ...] = (0.05, 0.05)

    def __post_init__(self):
        for name in ("weights", "means", "stds"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (len(self.weights) == len(self.means) == len(self.stds) >= 1):
            raise ValueError("mixture components must have matching lengths")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if min(self.stds) < 0:
            raise ValueError("mixture std devs must be non-negative")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=shape, p=self.weights)
        z = rng.standard_normal(shape)
        return np.asarray(self.means)[comp] + np.asarray(self.stds)[comp] * z


@dataclass(frozen=True)
class ModelConfig:
    d: int = 150
    mlp_depth: int = 2
    leaky_slope: float = 0.01
    iterations_train: int = 30
    iterations_infer: int = 50
    restarts_infer: int = 10
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    learning_rate: float = 1e-3
    batch_size: int = 16
    # "mean": average L_train over every iteration; "final": last iteration only
    objective: str = "mean"
    grad_clip: float | None = 1.0
    # (progress, factor): learning rate is multiplied by factor once the
    # fraction of epochs (or of the time budget) done reaches progress
    lr_steps: tuple[tuple[float, float], ...] = ()
    # decoder output scale for V and theta (per-unit, radians)
    v_scale: float = 0.02
    va_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseSpec(**self.noise))
        if self.d < 1 or self.mlp_depth < 1:
            raise ValueError("d and mlp_depth must be at least 1")
        if min(self.iterations_train, self.iterations_infer, self.restarts_infer) < 1:
            raise ValueError("iterations and restarts must be at least 1")
        if self.objective not in ("mean", "final"):
            raise ValueError("objective must be 'mean' or 'final'")
        steps = tuple((float(a), float(b)) for a, b in self.lr_steps)
        if any(not 0.0 <= a <= 1.0 or b <= 0 for a, b in steps):
            raise ValueError("lr_steps need progress in [0, 1] and positive factors")
        object.__setattr__(self, "lr_steps", tuple(sorted(steps)))

    def lr_at(self, progress: float) -> float:
        lr = self.learning_rate
        for at, factor in self.lr_steps:
            if progress >= at:
                lr = self.learning_rate * factor
        return lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


# --- graph rewrite ---------------------------------------------------------

@dataclass(eq=False)
class SolverGraph:
    """Bipartite bus/branch graph, possibly a disjoint union of several grids.

    Arc ``k`` joins bus ``arc_bus[k]`` and branch ``arc_branch[k]``; it is
    traversed in both directions, so there are ``4 * n_branch`` directed arcs.
    """

    nets: tuple[Network, ...]
    n_bus: int
    n_branch: int
    arc_bus: np.ndarray
    arc_branch: np.ndarray
    branch_features: np.ndarray
    bus_types: np.ndarray
    known: np.ndarray
    known_values: np.ndarray
    graph_of_bus: np.ndarray
    bus_offsets: np.ndarray
    ybus: AdmittanceMatrix

    @property
    def bus_nodes(self) -> np.ndarray:
        return np.arange(self.n_bus)

    @property
    def branch_nodes(self) -> np.ndarray:
        return np.arange(self.n_branch)

    @property
    def n_arcs(self) -> int:
        return 2 * len(self.arc_bus)

    @property
    def n_graphs(self) -> int:
        return len(self.nets)

    def __post_init__(self):
        self.seg_arc_bus = Segments(self.arc_bus, self.n_bus)
        self.seg_arc_branch = Segments(self.arc_branch, self.n_branch)
        self.seg_graph = Segments(self.graph_of_bus, self.n_graphs)
        self.type_index = {
            t: Segments(np.flatnonzero(self.bus_types == t), self.n_bus) for t in BusType
        }
        counts = np.bincount(self.graph_of_bus, minlength=self.n_graphs).astype(float)
        self.inv_count = 1.0 / np.maximum(counts, 1.0)
        rows, cols, g, b = self.ybus.coo
        self.seg_rows = Segments(rows, self.n_bus)
        self.seg_cols = Segments(cols, self.n_bus)
        self.y_g = g.reshape(-1, 1)
        self.y_b = b.reshape(-1, 1)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        o = self.bus_offsets
        return [values[a:b] for a, b in zip(o[:-1], o[1:])]


def build_solver_graph(net: Network, ybus: AdmittanceMatrix | None = None) -> SolverGraph:
    return batch_solver_graphs([net], None if ybus is None else [ybus])


def batch_solver_graphs(nets: Sequence[Network],
                        ybuses: Sequence[AdmittanceMatrix] | None = None) -> SolverGraph:
    union = disjoint_union(nets, ybuses)
    arc_bus, arc_branch, feats = [], [], []
    for g, net in enumerate(union.nets):
        arr = net.branch_arrays
        off = union.bus_offsets[g]
        boff = union.branch_offsets[g]
        m = len(arr["f"])
        br = boff + np.arange(m)
        arc_bus += [off + arr["f"], off + arr["t"]]
        arc_branch += [br, br]
        y = 1.0 / (arr["r"] + 1j * arr["x"])
        feats.append(np.stack([y.real, y.imag], axis=1))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return SolverGraph(
        nets=union.nets,
        n_bus=union.n_bus,
        n_branch=int(union.branch_offsets[-1]),
        arc_bus=cat(arc_bus, np.int64),
        arc_branch=cat(arc_branch, np.int64),
        branch_features=np.concatenate(feats).reshape(-1, 2) if feats else np.zeros((0, 2)),
        bus_types=np.concatenate([n.bus_types for n in union.nets]),
        known=np.concatenate([n.known_mask for n in union.nets]),
        known_values=np.concatenate([n.values for n in union.nets]),
        graph_of_bus=union.graph_of_bus,
        bus_offsets=union.bus_offsets,
        ybus=union.ybus,
    )


# --- randomization ---------------------------------------------------------

def randomize_start(state: GridState, noise: NoiseSpec, rng: np.random.Generator) -> GridState:
    """Add mixture noise to the unknown variables only."""
    values = state.as_array()
    eps = noise.sample(rng, values.shape)
    return GridState.from_array(np.where(state.known, values, values + eps), state.known)


def random_starts(graph: SolverGraph, noise: NoiseSpec, rng) -> np.ndarray:
    starts = [randomize_start(flat_state(net), noise, rng).as_array() for net in graph.nets]
    return np.concatenate(starts)


# --- parameters ------------------------------------------------------------

def _glorot(rng, n_in, n_out, gain=1.0):
    lim = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def _mlp_params(rng, prefix, n_in, d, n_out, depth, out_gain=1.0):
    params = {}
    dims = [n_in] + [d] * (depth - 1) + [n_out]
    for k in range(depth):
        gain = out_gain if k == depth - 1 else 1.0
        params[f"{prefix}.w{k}"] = _glorot(rng, dims[k], dims[k + 1], gain)
        params[f"{prefix}.b{k}"] = np.zeros(dims[k + 1])
    return params


def _lstm_params(rng, prefix, n_in, d):
    b = np.zeros(4 * d)
    b[d:2 * d] = 1.0  # forget gate bias
    return {f"{prefix}.w": _glorot(rng, n_in + d, 4 * d), f"{prefix}.b": b}


LSTM_NAMES = {BusType.PQ: "lstm_pq", BusType.PV: "lstm_pv", BusType.SLACK: "lstm_slack"}


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None,
                nets: Sequence[Network] | None = None) -> dict[str, Tensor]:
    """Fresh weights plus input/output scales fitted on ``nets`` (if given)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, depth = cfg.d, cfg.mlp_depth
    raw = {}
    raw.update(_mlp_params(rng, "enc", N_BUS_FEATURES, d, d, depth))
    raw.update(_mlp_params(rng, "msg", 2 * d, d, d, depth))
    raw.update(_mlp_params(rng, "edge_recv", d + N_BRANCH_FEATURES, d, d, depth))
    raw.update(_lstm_params(rng, "lstm_branch", d, d))
    raw.update(_mlp_params(rng, "trans", 2 * d, d, d, depth))
    raw.update(_mlp_params(rng, "node_recv", d, d, d, depth))
    for name in LSTM_NAMES.values():
        raw.update(_lstm_params(rng, name, 2 * d, d))
    raw.update(_lstm_params(rng, "lstm_final", d, d))
    raw.update(_mlp_params(rng, "dec", 2 * d, d, 4, depth, out_gain=0.01))
    params = {k: ad.parameter(v) for k, v in raw.items()}
    scales = fit_scales(nets) if nets else default_scales()
    params.update({f"scale.{k}": Tensor(v) for k, v in scales.items()})
    return params


def default_scales() -> dict[str, float]:
    return {"p": 0.01, "q": 0.01, "g": 100.0, "b": 100.0}


def fit_scales(nets: Sequence[Network]) -> dict[str, float]:
    """RMS magnitudes of specified injections and branch admittances."""
    ps, qs, gs, bs = [], [], [], []
    for net in nets:
        known = net.known_mask
        ps.append(net.values[known[:, 0], 0])
        qs.append(net.values[known[:, 1], 1])
        arr = net.branch_arrays
        y = 1.0 / (arr["r"] + 1j * arr["x"])
        gs.append(y.real)
        bs.append(y.imag)
    rms = lambda xs, floor: max(float(np.sqrt(np.mean(np.concatenate(xs) ** 2)))
                                if sum(len(x) for x in xs) else floor, floor)
    return {"p": rms(ps, 1e-6), "q": rms(qs, 1e-6), "g": rms(gs, 1e-6), "b": rms(bs, 1e-6)}


def trainable(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=not k.startswith("scale.")) for k, v in arrays.items()}


def save_model(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    ad.save_checkpoint(path, params_to_arrays(params), cfg.to_dict())


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig]:
    arrays, config = ad.load_checkpoint(path)
    return params_from_arrays(arrays), ModelConfig.from_dict(config)


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype)
            for k, v in params.items()}


# --- network pieces --------------------------------------------------------

def _mlp(params, prefix, x: Tensor, depth: int, slope: float) -> Tensor:
    for k in range(depth):
        x = ad.linear(x, params[f"{prefix}.w{k}"], params[f"{prefix}.b{k}"])
        if k < depth - 1:
            x = ad.leaky_relu(x, slope)
    return x


def _lstm(params, prefix, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    d = h.shape[1]
    z = ad.linear(ad.concat([x, h], axis=1), params[f"{prefix}.w"], params[f"{prefix}.b"])
    i = ad.sigmoid(z[:, :d])
    f = ad.sigmoid(z[:, d:2 * d])
    g = ad.tanh(z[:, 2 * d:3 * d])
    o = ad.sigmoid(z[:, 3 * d:])
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def bus_features(graph: SolverGraph, start: np.ndarray, params) -> np.ndarray:
    sp_, sq = params["scale.p"].item(), params["scale.q"].item()
    va = start[:, VA]
    onehot = np.stack([graph.bus_types == t for t in BusType], axis=1).astype(float)
    feats = np.column_stack([
        start[:, 0] / sp_,
        start[:, 1] / sq,
        (start[:, VM] - 1.0) / 0.1,
        va / 0.1,
        np.sin(va),
        np.cos(va),
        onehot,
    ])
    return feats


def physics_train_loss(graph: SolverGraph, x: Tensor) -> Tensor:
    """Per-graph ln(1 + sum of squared residuals) as an (n_graphs, 1) tensor."""
    n = graph.n_bus
    p, q, vm, va = x[:, 0:1], x[:, 1:2], x[:, 2:3], x[:, 3:4]
    theta = ad.gather(va, graph.seg_rows) - ad.gather(va, graph.seg_cols)
    vv = ad.gather(vm, graph.seg_rows) * ad.gather(vm, graph.seg_cols)
    cos_t, sin_t = ad.cos(theta), ad.sin(theta)
    gy, by = Tensor(graph.y_g, dtype=x.data.dtype), Tensor(graph.y_b, dtype=x.data.dtype)
    pc = ad.scatter_add(vv * (gy * cos_t + by * sin_t), graph.seg_rows, n)
    qc = ad.scatter_add(vv * (gy * sin_t - by * cos_t), graph.seg_rows, n)
    lp, lq = p - pc, q - qc
    sq = ad.scatter_add(ad.square(lp) + ad.square(lq), graph.seg_graph, graph.n_graphs)
    return ad.ln1p(sq)


def forward_raw(graph: SolverGraph, start: np.ndarray, params: dict[str, Tensor],
                cfg: ModelConfig, iterations: int, with_loss: bool = False):
    """Run the recurrent stack; returns the clamped candidate tensors (and losses)."""
    depth, slope, d = cfg.mlp_depth, cfg.leaky_slope, cfg.d
    dtype = params["enc.w0"].data.dtype
    n, m = graph.n_bus, graph.n_branch
    mlp = lambda name, x: _mlp(params, name, x, depth, slope)

    enc = mlp("enc", Tensor(bus_features(graph, start, params), dtype=dtype))
    br_feat = graph.branch_features / np.array(
        [params["scale.g"].item(), params["scale.b"].item()])
    br_feat = Tensor(br_feat, dtype=dtype)
    h_bus, c_bus = enc, Tensor(np.zeros((n, d)), dtype=dtype)
    h_br = Tensor(np.zeros((m, d)), dtype=dtype)
    c_br = Tensor(np.zeros((m, d)), dtype=dtype)

    out_scale = np.broadcast_to(
        np.array([params["scale.p"].item(), params["scale.q"].item(), cfg.v_scale, cfg.va_scale]),
        (n, 4))
    out_offset = np.broadcast_to(np.array([0.0, 0.0, 1.0, 0.0]), (n, 4))
    out_scale = Tensor(out_scale, dtype=dtype)
    out_offset = Tensor(out_offset, dtype=dtype)
    known_values = Tensor(graph.known_values, dtype=dtype)
    inv_count = Tensor(np.repeat(graph.inv_count[graph.graph_of_bus][:, None], d, axis=1),
                       dtype=dtype)

    candidates, losses = [], []
    for _ in range(iterations):
        # bus -> branch
        msg = mlp("msg", ad.concat([ad.gather(h_bus, graph.seg_arc_bus),
                                    ad.gather(h_br, graph.seg_arc_branch)], axis=1))
        m_br = ad.scatter_add(msg, graph.seg_arc_branch, m)
        e_in = mlp("edge_recv", ad.concat([m_br, br_feat], axis=1))
        h_br, c_br = _lstm(params, "lstm_branch", e_in, h_br, c_br)
        # branch -> bus
        tr = mlp("trans", ad.concat([ad.gather(h_br, graph.seg_arc_branch),
                                     ad.gather(h_bus, graph.seg_arc_bus)], axis=1))
        m_bus = ad.scatter_add(tr, graph.seg_arc_bus, n)
        recv = mlp("node_recv", m_bus)
        x_in = ad.concat([enc, recv], axis=1)
        parts_h, parts_c = [], []
        for t, name in LSTM_NAMES.items():
            seg = graph.type_index[t]
            if len(seg) == 0:
                continue
            ht, ct = _lstm(params, name, ad.gather(x_in, seg), ad.gather(h_bus, seg),
                           ad.gather(c_bus, seg))
            parts_h.append(ad.scatter_add(ht, seg, n))
            parts_c.append(ad.scatter_add(ct, seg, n))
        h_bus, c_bus = _sum(parts_h), _sum(parts_c)
        # readout
        h_out, _ = _lstm(params, "lstm_final", h_bus, h_bus, c_bus)
        g_mean = ad.scatter_add(h_out, graph.seg_graph, graph.n_graphs)
        g_mean = ad.gather(g_mean, graph.seg_graph) * inv_count
        y = mlp("dec", ad.concat([h_out, g_mean], axis=1))
        x = y * out_scale + out_offset
        x = ad.where(graph.known, known_values, x)
        candidates.append(x)
        if with_loss:
            losses.append(physics_train_loss(graph, x))
    return candidates, losses


def _sum(parts):
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


@dataclass
class Candidate:
    state: GridState
    iteration: int
    restart: int
    loss: LossReport


def candidate_totals(graph: SolverGraph, values: np.ndarray) -> np.ndarray:
    """Per-graph L_total of a stacked candidate array, via the shared kernel."""
    values = np.asarray(values, dtype=float)
    pc, qc = calc_injections(graph.ybus, values[:, VM], values[:, VA])
    res = np.abs(values[:, 0] - pc) + np.abs(values[:, 1] - qc)
    res = np.where(np.isfinite(res), res, np.inf)
    return np.bincount(graph.graph_of_bus, weights=res, minlength=graph.n_graphs)


def forward(net: Network, graph: SolverGraph, start: GridState, params, cfg: ModelConfig,
            iterations: int | None = None) -> list[Candidate]:
    iterations = iterations or cfg.iterations_infer
    cands, _ = forward_raw(graph, start.as_array(), params, cfg, iterations)
    ybus = graph.ybus
    out = []
    for it, x in enumerate(cands):
        values = np.where(graph.known, graph.known_values, x.data.astype(float))
        state = GridState.from_array(values, graph.known)
        out.append(Candidate(state, it, 0, evaluate(net, state, ybus)))
    return out


def model_gradcheck(net: Network, cfg: ModelConfig, rng: np.random.Generator | None = None,
                    h: float = 1e-5) -> dict[str, float]:
    """Relative gradient error of the training objective for every parameter tensor.

    Use a small ``d``: every weight is perturbed twice.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = cast_params(init_params(cfg, rng, [net]), np.float64)
    # move the decoder off its tiny initial gain so every path carries signal
    for k in params:
        if k.startswith("dec.w"):
            params[k].data = params[k].data * 30.0
    graph = build_solver_graph(net)
    start = random_starts(graph, cfg.noise, rng)
    f = lambda: _batch_loss(graph, start, params, cfg)[0]
    weights = trainable(params)
    names = sorted(weights)
    grads = ad.analytic_grads(f, [weights[k] for k in names])
    return {k: ad.rel_error(g, ad.numeric_grad(f, weights[k], h)) for k, g in zip(names, grads)}


# --- inference -------------------------------------------------------------

@dataclass
class Inference:
    state: GridState
    report: LossReport
    iteration: int
    restart: int
    n_candidates: int


def infer_many(nets: Sequence[Network], params, cfg: ModelConfig, rng: np.random.Generator,
               restarts: int | None = None, iterations: int | None = None,
               ybuses: Sequence[AdmittanceMatrix] | None = None,
               chunk_buses: int = 20000) -> list[Inference]:
    """Best-of-(restarts x iterations) candidate for every network.

    Every case draws its restart noise from its own child stream, so the
    first ``r`` restarts of a case do not depend on the total restart count.
    """
    restarts = restarts or cfg.restarts_infer
    iterations = iterations or cfg.iterations_infer
    ybuses = list(ybuses) if ybuses is not None else [build_ybus(n) for n in nets]
    streams = [np.random.default_rng(s) for s in rng.integers(0, 2**63, size=len(nets))]
    starts = [[randomize_start(flat_state(net), cfg.noise, r).as_array()
               for _ in range(restarts)] for net, r in zip(nets, streams)]
    results: list[Inference] = []
    i = 0
    while i < len(nets):
        j, size = i, 0
        while j < len(nets) and (j == i or size + nets[j].n_bus * restarts <= chunk_buses):
            size += nets[j].n_bus * restarts
            j += 1
        chunk = list(range(i, j))
        rep_nets = [nets[c] for c in chunk for _ in range(restarts)]
        rep_y = [ybuses[c] for c in chunk for _ in range(restarts)]
        graph = batch_solver_graphs(rep_nets, rep_y)
        start = np.concatenate([s for c in chunk for s in starts[c]])
        cands, _ = forward_raw(graph, start, params, cfg, iterations)
        best_loss = np.full(graph.n_graphs, np.inf)
        best_it = np.zeros(graph.n_graphs, dtype=int)
        best_vals = [None] * graph.n_graphs
        examined = np.zeros(graph.n_graphs, dtype=int)
        for it, x in enumerate(cands):
            vals = np.where(graph.known, graph.known_values, x.data.astype(float))
            tot = candidate_totals(graph, vals)
            examined += 1
            better = tot < best_loss
            for g in np.flatnonzero(better):
                a, b = graph.bus_offsets[g], graph.bus_offsets[g + 1]
                best_vals[g] = vals[a:b].copy()
                best_it[g] = it
            best_loss = np.where(better, tot, best_loss)
        for k, c in enumerate(chunk):
            gs = range(k * restarts, (k + 1) * restarts)
            # first minimum wins: restart order is stable as restarts grow
            g = min(gs, key=lambda g: (best_loss[g], g))
            vals = best_vals[g]
            if vals is None:
                vals = flat_state(nets[c]).as_array()
            state = GridState.from_array(vals, nets[c].known_mask)
            results.append(Inference(state, evaluate(nets[c], state, ybuses[c]),
                                     int(best_it[g]), g - k * restarts,
                                     int(examined[list(gs)].sum())))
        i = j
    return results


def infer_best(net: Network, params, cfg: ModelConfig, rng: np.random.Generator):
    res = infer_many([net], params, cfg, rng)[0]
    return res.state, res.report


# --- training --------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_train_loss: float
    mean_loss_per_node_mva: float
    wall_time: float
    cpu_time: float = 0.0


def _batch_loss(graph: SolverGraph, start: np.ndarray, params, cfg: ModelConfig):
    cands, losses = forward_raw(graph, start, params, cfg, cfg.iterations_train, with_loss=True)
    if cfg.objective == "final":
        total = ad.mean(losses[-1])
    else:
        acc = losses[0]
        for l in losses[1:]:
            acc = acc + l
        total = ad.mean(acc) * (1.0 / len(losses))
    return total, cands


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> None:
    if not max_norm:
        return
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)


def train(dataset: Sequence[Network], params: dict[str, Tensor], cfg: ModelConfig, epochs: int,
          rng: np.random.Generator | None = None, callback=None,
          adam: ad.AdamState | None = None,
          time_budget: float | None = None) -> tuple[dict[str, Tensor], list[EpochLog]]:
    """Unsupervised training on unsolved cases; only the physics loss is used.

    With ``time_budget`` (CPU seconds) training stops before an epoch that
    would likely overrun it, and the learning-rate schedule follows the
    elapsed share of the budget instead of the epoch count.
    """
    nets = list(dataset)
    if not nets:
        raise EmptyDataset("training needs at least one case")
    if epochs <= 0:
        return params, []
    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    ybuses = [build_ybus(n) for n in nets]
    adam = adam or ad.AdamState(lr=cfg.learning_rate)
    weights = trainable(params)
    history: list[EpochLog] = []
    cpu0 = time.process_time()
    for epoch in range(epochs):
        used = time.process_time() - cpu0
        if time_budget is not None:
            last = history[-1].cpu_time if history else 0.0
            if used + last > time_budget:
                break
            progress = used / time_budget
        else:
            progress = epoch / epochs
        if cfg.lr_steps:
            adam.lr = cfg.lr_at(progress)
        t0 = time.perf_counter()
        c0 = time.process_time()
        order = rng.permutation(len(nets))
        losses, per_node = [], []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            graph = batch_solver_graphs([nets[i] for i in idx], [ybuses[i] for i in idx])
            start = random_starts(graph, cfg.noise, rng)
            for p in weights.values():
                p.grad = None
            with ad.Tape() as tape:
                loss, cands = _batch_loss(graph, start, params, cfg)
            ad.backward(tape, loss)
            grads = {k: p.grad for k, p in weights.items() if p.grad is not None}
            _clip(grads, cfg.grad_clip)
            ad.adam_step(weights, grads, adam)
            losses.append(loss.item())
            best = np.full(graph.n_graphs, np.inf)
            for x in cands:
                vals = np.where(graph.known, graph.known_values, x.data.astype(float))
                best = np.minimum(best, candidate_totals(graph, vals))
            sizes = np.diff(graph.bus_offsets)
            bases = np.array([n.base_mva for n in graph.nets])
            per_node += (best * bases / sizes).tolist()
        entry = EpochLog(epoch, float(np.mean(losses)), float(np.mean(per_node)),
                         time.perf_counter() - t0, time.process_time() - c0)
        history.append(entry)
        log.info("epoch %d loss %.6g per-node %.4g MVA (%.1fs)", epoch,
                 entry.mean_train_loss, entry.mean_loss_per_node_mva, entry.wall_time)
        if callback is not None:
            callback(entry)
    return params, history


def fine_tune(params: dict[str, Tensor], dataset: Sequence[Network], cfg: ModelConfig,
              epochs: int, rng: np.random.Generator | None = None, callback=None):
    """Continue training pre-trained weights on a more specific dataset."""
    tuned = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}
    tuned, _ = train(dataset, tuned, cfg, epochs, rng=rng, callback=callback)
    return tuned


def write_training_log(path, history: Sequence[EpochLog]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_train_loss", "mean_loss_per_node_mva", "wall_time"])
        for e in history:
            w.writerow([e.epoch, repr(e.mean_train_loss), repr(e.mean_loss_per_node_mva),
                        f"{e.wall_time:.6f}"])
