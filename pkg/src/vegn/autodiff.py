"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in execution
order together with their backward rules. :func:`backward` replays the tape in
reverse and accumulates ``dL/dp`` into every reachable :class:`Parameter`.
Outside a tape, the same operations run as plain numpy inference.

Broadcasting of binary operations is limited to: equal shapes, a size-1
operand, a row vector over a matrix, or a column vector over a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyNeighborhoodError,
    NonFiniteError,
    StaleTapeError,
)

LEAKY_SLOPE = 0.2

_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array that may carry a gradient record."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A learnable leaf tensor with an accumulated gradient."""

    def __init__(self, value, name="param"):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    rule: Callable


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations whose inputs require gradients are
    appended while the tape is active. A tape can be replayed once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise StaleTapeError("tape was already consumed by backward(); start a new tape")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, rule):
        if self.consumed:
            raise StaleTapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(out, tuple(inputs), rule))
        out._tape = self

    def backward(self, loss):
        if self.consumed:
            raise StaleTapeError("backward() called twice on the same tape without a new forward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
        if loss.requires_grad and loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Parameter):
                    if gi.shape != t.grad.shape:
                        gi = np.broadcast_to(gi, t.grad.shape)
                    t.grad += gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
        self.consumed = True
        self.nodes = []


def backward(loss, tape=None):
    """Accumulate ``dL/dp`` into every parameter reachable from ``loss``."""
    if tape is None:
        tape = loss._tape
    if tape is None:
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward() needs a scalar loss")
        if loss.requires_grad:
            raise ContractError("loss requires grad but was not recorded on a tape")
        return
    tape.backward(loss)


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, rule):
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced NaN or Inf")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _scatter_add(index, values, n):
    """``out[index[i]] += values[i]`` over rows, via one flat bincount."""
    values = np.asarray(values, dtype=np.float64)
    tail = values.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    if width == 1:
        return np.bincount(index, weights=values.reshape(-1), minlength=n).reshape((n,) + tail)
    flat = (index[:, None] * width + np.arange(width)).reshape(-1)
    return np.bincount(flat, weights=values.reshape(-1), minlength=n * width).reshape((n,) + tail)


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 2:
        m, n = big
        if small in ((n,), (1, n), (m, 1)):
            return
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result(out, (a, b), rule)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), rule)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# unary elementwise


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def clip(a, lo, hi):
    """Clamp into ``[lo, hi]``; gradient flows only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "exp": exp,
    "sigmoid": sigmoid,
}


def elementwise(kind, a, b=None, slope=LEAKY_SLOPE):
    """Dispatch one of ``add``, ``mul``, ``exp``, ``leaky_relu``, ``sigmoid``."""
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "mul"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), rule)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis=1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def rule(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(out, ts, rule)


def slice_cols(a, start, stop):
    a = as_tensor(a)

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), rule)


def take_rows(a, index):
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def rule(g):
        return (_scatter_add(index, g, a.shape[0]).reshape(a.shape),)

    return _result(a.data[index], (a,), rule)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of ``a`` that share a segment id; empty segments are zero."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise DimensionError(f"segment ids of length {seg.shape[0]} for {a.shape[0]} rows")
    out = _scatter_add(seg, a.data, num_segments)
    return _result(out, (a,), lambda g: (g[seg],))


def _segment_max(x, seg, num_segments):
    m = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(m, seg, x)
    return m


def segment_softmax(logits, segment_ids, num_segments):
    """Softmax over the rows of ``logits`` that share a segment id.

    Used for attention over edge lists: row ``e`` is the logit of edge ``e`` and
    its segment is the destination node. Each column normalizes separately.
    """
    logits = as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.intp)
    x = logits.data
    if seg.shape[0] != x.shape[0]:
        raise DimensionError(f"segment ids of length {seg.shape[0]} for {x.shape[0]} rows")
    if x.shape[0] == 0:
        return _result(x.copy(), (logits,), lambda g: (g,))
    m = _segment_max(x, seg, num_segments)
    e = np.exp(x - m[seg])
    z = _scatter_add(seg, e, num_segments)
    out = e / z[seg]

    def rule(g):
        dots = _scatter_add(seg, g * out, num_segments)
        return (out * (g - dots[seg]),)

    return _result(out, (logits,), rule)


def softmax_rows(a, mask=None, allow_empty=False):
    """Row-wise softmax with optional boolean mask (True = keep).

    Masked entries are exactly zero. A fully masked row raises
    :class:`EmptyNeighborhoodError` unless ``allow_empty``, in which case the
    row is all zeros.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {a.shape}")
    x = a.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise DimensionError(f"mask shape {keep.shape} does not match {x.shape}")
    empty = ~keep.any(axis=1)
    if empty.any() and not allow_empty:
        rows = np.flatnonzero(empty)[:5].tolist()
        raise EmptyNeighborhoodError(f"fully masked softmax rows: {rows}")
    shifted = np.where(keep, x, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    m[empty] = 0.0
    e = np.where(keep, np.exp(shifted - m), 0.0)
    z = e.sum(axis=1, keepdims=True)
    z[empty] = 1.0
    out = e / z

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (a,), rule)


def dropout(a, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""

    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self):
        return {k: v for k, v in self.errors.items() if v >= self.tolerance}

    def __len__(self):
        return len(self.errors)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(closure, params: Iterable[Parameter], step=1e-5, tolerance=1e-4, floor=1e-6):
    """Compare reverse-mode gradients with central finite differences.

    ``closure`` takes no arguments and returns a scalar :class:`Tensor`; it must
    be deterministic in the parameter values.
    """
    params = list(params)
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report
    zero_grad(params)
    with Tape() as tape:
        loss = closure()
    backward(loss, tape)
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = closure().item()
            flat[i] = orig - step
            fm = closure().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        report.errors[p.name] = relative_error(analytic, numeric, floor)
    zero_grad(params)
    return report
