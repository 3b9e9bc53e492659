"""A small reverse-mode differentiation engine over dense float64 matrices.

Every value is a 2-D array held by a :class:`Var` that belongs to a
:class:`Tape`. Primitives append a record to the tape as they run; a call to
:func:`backward` replays the records in reverse, touching only the entries
that the loss actually depends on.

Sparse graph operations are expressed through :func:`gather_rows`,
:func:`scatter_add_rows` and :func:`segment_softmax` over explicit index
arrays, which is all the attention layers need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalError, ShapeError

LEAKY_SLOPE = 0.2


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable=False, name=None):
        value = _as_matrix(value)
        return self._push(value, (), None, trainable=trainable, name=name)

    def const(self, value):
        return self.leaf(value, trainable=False)

    def param(self, value, name):
        return self.leaf(value, trainable=True, name=name)

    def _push(self, value, parents, vjp, trainable=False, name=None, op="leaf"):
        for p in parents:
            if p.tape is not self:
                raise ContractViolation("operands recorded on different tapes")
        var = Var(self, len(self.nodes), value, parents, vjp, trainable, name, op)
        self.nodes.append(var)
        return var


class Var:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "trainable", "name", "op")

    def __init__(self, tape, index, value, parents, vjp, trainable, name, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.trainable = trainable
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Var({label}, shape={self.shape})"


def _as_matrix(value):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got {arr.ndim}-d array")
    return arr


def _unbroadcast(grad, shape):
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.tape._push(av @ bv, (a, b), vjp, op="matmul")


def add(a, b):
    """Elementwise sum; a dimension of size 1 broadcasts."""
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.tape._push(a.value + b.value, (a, b), vjp, op="add")


def sub(a, b):
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return a.tape._push(a.value - b.value, (a, b), vjp, op="sub")


def mul(a, b):
    """Elementwise product; a dimension of size 1 broadcasts."""
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._push(av * bv, (a, b), vjp, op="mul")


def scale(a, c):
    c = float(c)
    return a.tape._push(a.value * c, (a,), lambda g: (g * c,), op="scale")


def rowwise_concat(*vars_):
    """Concatenate feature columns: row i of the result is the row-i vectors
    of the inputs laid end to end."""
    if not vars_:
        raise ContractViolation("rowwise_concat needs at least one operand")
    rows = vars_[0].shape[0]
    for v in vars_:
        if v.shape[0] != rows:
            raise ShapeError(
                f"rowwise_concat: row counts differ {vars_[0].shape} and {v.shape}"
            )
    widths = [v.shape[1] for v in vars_]
    cuts = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=1))

    out = np.concatenate([v.value for v in vars_], axis=1)
    return vars_[0].tape._push(out, tuple(vars_), vjp, op="rowwise_concat")


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    n, cols = a.shape

    def vjp(g):
        out = np.zeros((n, cols))
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push(a.value[idx], (a,), vjp, op="gather_rows")


def scatter_add_rows(a, idx, n_rows):
    """``out[idx[k]] += a[k]`` for every row k of ``a``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: index shape {idx.shape} vs operand {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError("scatter_add_rows: index out of range")
    out = np.zeros((n_rows, a.shape[1]))
    np.add.at(out, idx, a.value)

    def vjp(g):
        return (g[idx],)

    return a.tape._push(out, (a,), vjp, op="scatter_add_rows")


def leaky_relu(a, slope=LEAKY_SLOPE):
    av = a.value
    mask = av > 0
    out = np.where(mask, av, slope * av)
    return a.tape._push(out, (a,), lambda g: (np.where(mask, g, slope * g),), op="leaky_relu")


def sigmoid(a):
    out = _sigmoid(a.value)
    return a.tape._push(out, (a,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def log(a):
    av = a.value
    if np.any(av <= 0):
        raise NumericalError("log of a non-positive entry")
    return a.tape._push(np.log(av), (a,), lambda g: (g / av,), op="log")


def log_sigmoid(a):
    """Numerically stable ``log(sigmoid(a))``."""
    av = a.value
    out = -np.logaddexp(0.0, -av)
    return a.tape._push(out, (a,), lambda g: (g * _sigmoid(-av),), op="log_sigmoid")


def row_sum(a):
    return a.tape._push(a.value.sum(axis=1, keepdims=True), (a,),
                        lambda g: (np.broadcast_to(g, a.shape).copy(),), op="row_sum")


def total(a):
    shape = a.shape
    return a.tape._push(np.array([[a.value.sum()]]), (a,),
                        lambda g: (np.full(shape, g[0, 0]),), op="total")


def mean(a):
    n = a.value.size
    if n == 0:
        raise ContractViolation("mean of an empty matrix")
    return scale(total(a), 1.0 / n)


def segment_softmax(a, segment_ids, n_segments=None):
    """Softmax of each column taken separately within each segment of rows."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError(f"segment_softmax: segment ids {seg.shape} vs operand {a.shape}")
    if n_segments is None:
        n_segments = int(seg.max()) + 1 if seg.size else 0
    out = _segment_softmax(a.value, seg, n_segments)

    def vjp(g):
        dot = np.zeros((n_segments, a.shape[1]))
        np.add.at(dot, seg, g * out)
        return (out * (g - dot[seg]),)

    return a.tape._push(out, (a,), vjp, op="segment_softmax")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _segment_softmax(values, seg, n_segments):
    cols = values.shape[1]
    seg_max = np.full((n_segments, cols), -np.inf)
    np.maximum.at(seg_max, seg, values)
    ex = np.exp(values - seg_max[seg])
    denom = np.zeros((n_segments, cols))
    np.add.at(denom, seg, ex)
    return ex / denom[seg]


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(tape, loss):
    """Gradients of the scalar ``loss`` with respect to every trainable leaf
    it depends on, keyed by leaf name (or the leaf itself when unnamed).

    Trainable leaves the loss does not reach get a zero gradient.
    """
    if loss.tape is not tape:
        raise ContractViolation("loss was not recorded on this tape")
    if loss.shape != (1, 1):
        raise ContractViolation(f"loss must be a 1x1 scalar, got shape {loss.shape}")

    grads = {loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if node.vjp is not None else grads.get(node.index)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg

    out = {}
    for node in tape.nodes:
        if node.trainable and node.vjp is None:
            key = node.name if node.name is not None else node
            g = grads.get(node.index)
            out[key] = np.array(g, dtype=np.float64) if g is not None else np.zeros(node.shape)
    return out


def grad_check(f, x, eps=1e-5):
    """Largest relative disagreement between the tape gradient of ``f`` at
    ``x`` and a central difference.

    ``f(tape, var)`` must build a 1x1 loss from ``var``. The error per entry is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not 0 < eps <= 1e-3:
        raise ContractViolation(f"eps must lie in (0, 1e-3], got {eps}")
    x = _as_matrix(x)

    def value(xv):
        t = Tape()
        out = f(t, t.param(xv, "x")).value
        if out.shape != (1, 1):
            raise ContractViolation(f"f must return a scalar, got shape {out.shape}")
        v = float(out[0, 0])
        if not np.isfinite(v):
            raise NumericalError("f returned a non-finite value")
        return v

    tape = Tape()
    var = tape.param(x, "x")
    loss = f(tape, var)
    analytic = backward(tape, loss)["x"]
    if not np.all(np.isfinite(analytic)):
        raise NumericalError("analytic gradient is not finite")

    numeric = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        numeric[i] = (value(xp) - value(xm)) / (2 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns new ``(params, state)``; the
    inputs are left untouched. Parameters without a gradient keep their value
    and moments."""
    step = state.step + 1
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)
