"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Only what the neural solver needs: no broadcasting beyond python scalars
(row-bias addition goes through :func:`linear`), 2-D matmul, row gather and
scatter-add for message passing.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_DEFAULT_DTYPE = np.float64
_local = threading.local()


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NonScalarLoss(ValueError):
    pass


class TapeReused(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations while active (``with Tape() as t``)."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        tape.records.append(_Record(out, inputs, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeReused("tape already used for a backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and not loss._from_op:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not t._from_op:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.records.clear()


# --- elementwise ----------------------------------------------------------

def _binary_shapes(op, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)
    return _emit(y, (a,), lambda g: (np.where(pos, g, slope * g),))


def sin(a: Tensor) -> Tensor:
    return _emit(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _emit(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def ln1p(a: Tensor) -> Tensor:
    return _emit(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


# --- structural -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch("linear", x.shape, w.shape)
    y = x.data @ w.data
    if b is None:
        return _emit(y, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    if b.shape != (w.shape[1],):
        raise ShapeMismatch("linear", x.shape, w.shape, b.shape)
    return _emit(y + b.data, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, tuple(shape)) from None
    return _emit(y, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != axis % len(ref)
        ):
            raise ShapeMismatch("concat", *[t.shape for t in tensors])
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit(y, tuple(tensors), grad_fn)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    if not (cond.shape == a.shape == b.shape):
        raise ShapeMismatch("where", cond.shape, a.shape, b.shape)
    zero = np.zeros((), dtype=a.data.dtype)
    return _emit(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (np.where(cond, g, zero), np.where(cond, zero, g)))


def slice_(a: Tensor, key) -> Tensor:
    y = a.data[key]

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _emit(np.array(y), (a,), grad_fn)


class Segments:
    """A reusable row index list with its precomputed summation matrix.

    Passing one of these to :func:`gather` / :func:`scatter_add` instead of a
    bare array avoids rebuilding the sparse scatter matrix on every call.
    """

    def __init__(self, index, n: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n = int(n)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.n):
            raise ShapeMismatch("segments", self.index.shape, (self.n,))
        m = self.index.size
        self.matrix = sp.csr_matrix(
            (np.ones(m), (self.index, np.arange(m))), shape=(self.n, m)
        )

    def __len__(self):
        return self.index.size

    def sum(self, x: np.ndarray) -> np.ndarray:
        out = self.matrix @ x
        return out.astype(x.dtype, copy=False)


def _segments(index, n: int) -> Segments:
    if isinstance(index, Segments):
        if index.n != n:
            raise ShapeMismatch("segments", (index.n,), (n,))
        return index
    return Segments(index, n)


def gather(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``."""
    seg = _segments(index, x.shape[0])
    return _emit(x.data[seg.index], (x,), lambda g: (seg.sum(g),))


def scatter_add(x: Tensor, index, n: int) -> Tensor:
    """``out[index[i]] += x[i]`` into ``n`` rows."""
    seg = _segments(index, n)
    if len(seg) != x.shape[0]:
        raise ShapeMismatch("scatter_add", x.shape, seg.index.shape)
    return _emit(seg.sum(x.data), (x,), lambda g: (g[seg.index],))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _emit(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),))
    y = a.data.sum(axis=axis)
    return _emit(y, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise ShapeMismatch("adam_step", params[name].shape, np.shape(g))
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- gradient checking ----------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the larger gradient's max-norm."""
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b))) / scale


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    analytic = analytic_grads(f, inputs)
    return max(
        (rel_error(a, numeric_grad(f, t, h)) for a, t in zip(analytic, inputs)), default=0.0
    )


def op_gradchecks(rng: np.random.Generator | None = None) -> dict[str, float]:
    """Gradient check of every differentiable op on small random float64 inputs.

    Each op output is contracted with a fixed random weight so the checked
    function is scalar and every output entry matters.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    def leaf(*shape, away_from_zero=False):
        x = rng.standard_normal(shape)
        if away_from_zero:
            x = np.sign(x) * (0.1 + np.abs(x))
        return Tensor(x, requires_grad=True, dtype=np.float64)

    def check(fn, *inputs):
        out_shape = fn(*inputs).shape
        w = Tensor(rng.standard_normal(out_shape), dtype=np.float64)
        return gradcheck(lambda: sum_(mul(fn(*inputs), w)), inputs)

    a, b = leaf(3, 4), leaf(3, 4)
    m = leaf(4, 5)
    bias = leaf(5)
    idx = np.array([0, 2, 2, 1, 0])
    mask = np.arange(12).reshape(3, 4) % 3 == 0
    return {
        "add": check(add, a, b),
        "sub": check(sub, a, b),
        "neg": check(neg, a),
        "mul": check(mul, a, b),
        "mul_scalar": check(lambda x: mul(x, 2.5), a),
        "square": check(square, a),
        "tanh": check(tanh, a),
        "sigmoid": check(sigmoid, a),
        "leaky_relu": check(lambda x: leaky_relu(x, 0.01), leaf(3, 4, away_from_zero=True)),
        "sin": check(sin, a),
        "cos": check(cos, a),
        "ln1p": check(ln1p, Tensor(rng.uniform(0.1, 2.0, (3, 4)), requires_grad=True,
                                   dtype=np.float64)),
        "matmul": check(matmul, a, m),
        "linear": check(linear, a, m, bias),
        "reshape": check(lambda x: reshape(x, (4, 3)), a),
        "concat": check(lambda x, y: concat([x, y], axis=1), a, b),
        "where": check(lambda x, y: where(mask, x, y), a, b),
        "slice": check(lambda x: slice_(x, (slice(0, 2), slice(1, 4))), a),
        "gather": check(lambda x: gather(x, idx), a),
        "scatter_add": check(lambda x: scatter_add(x, idx[:3], 4), a),
        "sum": check(lambda x: sum_(x, axis=0), a),
        "mean": check(lambda x: mean(x, axis=1), a),
    }


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """JSON header line, then little-endian raw buffers in manifest order."""
    manifest = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        buf = np.ascontiguousarray(arr, dtype=dt).tobytes()
        manifest[name] = {"shape": list(arr.shape), "dtype": dt.str, "offset": offset}
        offset += len(buf)
        blobs.append(buf)
    header = {"version": CHECKPOINT_VERSION, "config": config, "tensors": manifest}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for buf in blobs:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    body = memoryview(raw)[nl + 1:]
    tensors = {}
    for name, meta in header["tensors"].items():
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=count, offset=meta["offset"])
        tensors[name] = arr.reshape(meta["shape"]).astype(dt.newbyteorder("="))
    return tensors, header["config"]
