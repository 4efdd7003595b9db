"""Tape-based reverse-mode automatic differentiation on dense arrays.

The tape is an append-only list of primitive nodes recorded in execution
order, which doubles as a topological order for the backward sweep. Adjoints
are stored per node and released with the tape, so memory scales with the
number of recorded steps; at desk scale that is cheap and keeps gradients
exact.

Also provides MLP parameter containers, the AdamW optimizer with cosine
decay and global-norm clipping, and a byte-exact JSON checkpoint format.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

_LN_EPS = 1e-8


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents, vjp):
        self.value = value
        self.parents = parents
        self.vjp = vjp


class Var:
    """Handle to a tape node; supports numpy-flavoured arithmetic."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.value)


class Tape:
    """Records primitives during the forward pass; replays them in reverse."""

    def __init__(self, recording: bool = True):
        self.nodes: list[Node] = []
        self.recording = recording

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=float)
        if not self.recording:
            return Var(self, -1, value)
        self.nodes.append(Node(value, (), None))
        return Var(self, len(self.nodes) - 1, value)

    def _record(self, value, parents, vjp) -> Var:
        if not self.recording:
            return Var(self, -1, value)
        self.nodes.append(Node(value, tuple(p.index for p in parents), vjp))
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, out: Var) -> list[np.ndarray | None]:
        """Adjoints of a scalar output w.r.t. every node, by reverse sweep."""
        if not self.recording:
            raise RuntimeError("cannot backpropagate through a non-recording tape")
        if np.size(out.value) != 1:
            raise ValueError("backward requires a scalar output")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[out.index] = np.ones_like(np.asarray(out.value))
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            for j, part in zip(node.parents, node.vjp(g)):
                grads[j] = part if grads[j] is None else grads[j] + part
        return grads


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one argument must be a Var")


def as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.leaf(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if is_var(a) and is_var(b):
        return tape._record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))
    if is_var(a):
        return tape._record(out, (a,), lambda g: (_unbroadcast(g, av.shape),))
    return tape._record(out, (b,), lambda g: (_unbroadcast(g, bv.shape),))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if is_var(a) and is_var(b):
        return tape._record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))
    if is_var(a):
        return tape._record(out, (a,), lambda g: (_unbroadcast(g, av.shape),))
    return tape._record(out, (b,), lambda g: (_unbroadcast(-g, bv.shape),))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if is_var(a) and is_var(b):
        return tape._record(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))
    if is_var(a):
        return tape._record(out, (a,), lambda g: (_unbroadcast(g * bv, av.shape),))
    return tape._record(out, (b,), lambda g: (_unbroadcast(g * av, bv.shape),))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if is_var(a) and is_var(b):
        return tape._record(
            out, (a, b),
            lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
        )
    if is_var(a):
        return tape._record(out, (a,), lambda g: (_unbroadcast(g / bv, av.shape),))
    return tape._record(out, (b,), lambda g: (_unbroadcast(-g * av / (bv * bv), bv.shape),))


def neg(a):
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


# NOTE for primitive authors: vjp closures must capture arrays or shapes,
# never Var handles. A Var holds the tape, so capturing one creates a
# reference cycle (tape -> node -> closure -> var -> tape) that keeps every
# recorded buffer alive until a full garbage-collector pass.


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def swap(x):
        return np.swapaxes(x, -1, -2)

    if is_var(a) and is_var(b):
        return tape._record(
            out, (a, b),
            lambda g: (_unbroadcast(g @ swap(bv), av.shape), _unbroadcast(swap(av) @ g, bv.shape)),
        )
    if is_var(a):
        return tape._record(out, (a,), lambda g: (_unbroadcast(g @ swap(bv), av.shape),))
    return tape._record(out, (b,), lambda g: (_unbroadcast(swap(av) @ g, bv.shape),))


def contract_q(a, w: np.ndarray):
    """Contract the trailing axis of a (B, p, q) Var with constant (B, q) rows.

    Equivalent to a batched matrix-vector product but with an elementwise
    backward, which is much cheaper than batched GEMMs of tiny matrices.
    """
    w = np.asarray(w, dtype=float)
    out = np.einsum("bpq,bq->bp", a.value, w)
    return a.tape._record(out, (a,), lambda g: (g[:, :, None] * w[:, None, :],))


def rowvec_matmul(a, mats: np.ndarray):
    """Multiply (B, m) Var rows by constant per-row matrices (B, m, k)."""
    mats = np.asarray(mats, dtype=float)
    out = np.einsum("bi,bik->bk", a.value, mats)
    return a.tape._record(out, (a,), lambda g: (np.einsum("bk,bik->bi", g, mats),))


def tanh(a):
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y,))


def log(a):
    av = a.value
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    y = np.sqrt(a.value)
    return a.tape._record(y, (a,), lambda g: (g / (2.0 * y),))


def square(a):
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,))


def abs_(a):
    sign = np.sign(a.value)
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * sign,))


def maximum_const(a, c: float):
    """Elementwise max with a constant; subgradient 0 on the tie set."""
    mask = a.value > c
    return a.tape._record(np.maximum(a.value, c), (a,), lambda g: (g * mask,))


def minimum_const(a, c: float):
    mask = a.value < c
    return a.tape._record(np.minimum(a.value, c), (a,), lambda g: (g * mask,))


def sum_(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return a.tape._record(out, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose_last2(a):
    out = np.swapaxes(a.value, -1, -2)
    return a.tape._record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def slice_(a, key):
    """Basic slicing (no repeated indices); backward scatters into zeros."""
    out = a.value[key]
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        buf = np.zeros(shape, dtype=dtype)
        buf[key] = g
        return (buf,)

    return a.tape._record(out, (a,), vjp)


def take_rows(a, idx: np.ndarray):
    """Gather rows along axis 0; duplicates accumulate on the way back."""
    idx = np.asarray(idx)
    out = a.value[idx]
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        buf = np.zeros(shape, dtype=dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return a.tape._record(out, (a,), vjp)


def concat(vars_, axis=-1):
    tape = _tape_of(*vars_)
    vals = [value_of(v) for v in vars_]
    out = np.concatenate(vals, axis=axis)
    var_pos = [i for i, v in enumerate(vars_) if is_var(v)]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        parts = []
        for i in var_pos:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return tape._record(out, tuple(vars_[i] for i in var_pos), vjp)


def stack(vars_, axis=1):
    """Stack same-shaped Vars along a new axis."""
    expanded = []
    for v in vars_:
        shape = list(value_of(v).shape)
        shape.insert(axis, 1)
        expanded.append(reshape(v, tuple(shape)) if is_var(v) else value_of(v).reshape(shape))
    return concat(expanded, axis=axis)


def layernorm(x, gain, offset):
    """Layer normalisation over the last axis with learned gain and offset."""
    xv = value_of(x)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (xv - mu) * inv
    gv, ov = value_of(gain), value_of(offset)
    out = xhat * gv + ov

    def vjp(g):
        gy = g * gv
        dx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = _unbroadcast(g * xhat, gv.shape)
        doffset = _unbroadcast(g, ov.shape)
        return dx, dgain, doffset

    return _tape_of(x, gain, offset)._record(out, (x, gain, offset), vjp)


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "identity": lambda v: v}


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Per-layer weights and biases, with optional pre-activation layernorm."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    ln_gains: list[np.ndarray] | None = None
    ln_offsets: list[np.ndarray] | None = None

    @property
    def n_params(self) -> int:
        total = sum(w.size for w in self.weights) + sum(b.size for b in self.biases)
        if self.ln_gains is not None:
            total += sum(g.size for g in self.ln_gains)
            total += sum(o.size for o in self.ln_offsets)
        return total

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        if self.ln_gains is not None:
            for i, (g, o) in enumerate(zip(self.ln_gains, self.ln_offsets)):
                out.append((f"lng{i}", g))
                out.append((f"lnb{i}", o))
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        prefix = name.rstrip("0123456789")
        idx = int(name[len(prefix):])
        target = {"w": self.weights, "b": self.biases,
                  "lng": self.ln_gains, "lnb": self.ln_offsets}[prefix]
        target[idx] = value


def mlp_init(sizes, activation="tanh", layernorm_hidden=False, rng=None, final_bias=0.0):
    """Glorot-uniform weights, zero biases; final bias settable for warm starts."""
    rng = rng or np.random.default_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1] = biases[-1] + final_bias
    gains = offsets = None
    if layernorm_hidden and len(sizes) > 2:
        gains = [np.ones(s) for s in sizes[1:-1]]
        offsets = [np.zeros(s) for s in sizes[1:-1]]
    return MlpParams(weights, biases, activation, gains, offsets)


def lift_mlp(tape: Tape, params: MlpParams, collector: list | None = None) -> MlpParams:
    """Re-root the parameter arrays as leaf Vars.

    Leaves are recorded in ``arrays()`` order; when ``collector`` is given the
    Vars are appended to it so callers can align gradients with parameters.
    """
    lifted = MlpParams(weights=[], biases=[], activation=params.activation)
    for w, b in zip(params.weights, params.biases):
        wv, bv = tape.leaf(w), tape.leaf(b)
        lifted.weights.append(wv)
        lifted.biases.append(bv)
        if collector is not None:
            collector.extend((wv, bv))
    if params.ln_gains is not None:
        lifted.ln_gains, lifted.ln_offsets = [], []
        for g, o in zip(params.ln_gains, params.ln_offsets):
            gv, ov = tape.leaf(g), tape.leaf(o)
            lifted.ln_gains.append(gv)
            lifted.ln_offsets.append(ov)
            if collector is not None:
                collector.extend((gv, ov))
    return lifted


def mlp_apply(lifted: MlpParams, x) -> Var:
    """Forward pass of a lifted MLP; activation on all but the final layer."""
    act = _ACTIVATIONS[lifted.activation]
    h = x
    last = len(lifted.weights) - 1
    for i, (w, b) in enumerate(zip(lifted.weights, lifted.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            if lifted.ln_gains is not None:
                h = layernorm(h, lifted.ln_gains[i], lifted.ln_offsets[i])
            h = act(h)
    return h


def mlp_eval(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass (inference)."""
    tape = Tape(recording=False)
    return mlp_apply(lift_mlp(tape, params), tape.leaf(x)).value


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    """AdamW state: moment accumulators plus schedule and clipping knobs."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 0.0          # 0 disables clipping
    total_steps: int = 0       # 0 disables the cosine schedule
    step: int = 0
    skipped: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def current_lr(self) -> float:
        if self.total_steps <= 0:
            return self.lr
        frac = min(self.step, self.total_steps) / self.total_steps
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(opt: OptState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected AdamW update; skips (and counts) non-finite grads."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    if not all(np.all(np.isfinite(g)) for g in grads):
        opt.skipped += 1
        return params
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    lr = opt.current_lr()
    grads, _ = clip_by_global_norm(grads, opt.clip)
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        update = (opt.m[i] / bc1) / (np.sqrt(opt.v[i] / bc2) + opt.eps)
        new = p - lr * update
        if opt.weight_decay > 0:
            new = new - lr * opt.weight_decay * p
        out.append(new)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {
        "dtype": str(a.dtype),
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Self-describing JSON checkpoint; array bytes survive round trips exactly."""
    doc = {"meta": meta, "arrays": {k: _encode_array(v) for k, v in arrays.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return {k: _decode_array(v) for k, v in doc["arrays"].items()}, doc["meta"]


def finite_difference_grad(f, arrays: list[np.ndarray], eps: float = 1e-5):
    """Central-difference gradients of a scalar function; test oracle."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(arrays)
            flat[i] = orig - eps
            dn = f(arrays)
            flat[i] = orig
            gflat[i] = (up - dn) / (2.0 * eps)
        grads.append(g)
    return grads
