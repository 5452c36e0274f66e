"""
Minimal reverse-mode differentiation over dense float64 arrays.

Every op evaluates eagerly with numpy and, when any input requires a
gradient, appends a record to the calling thread's active ``Tape``.  The tape
is rebuilt on every forward pass; ``backward`` replays it in reverse.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them must hold a single element.  Bias additions go through ``linear`` and
per-row scalings through explicit constants.

    >>> x = parameter([1.0, 2.0, 3.0])
    >>> with Tape():
    ...     loss = sum_(x * x) * 0.5
    ...     backward(loss)
    >>> x.grad.tolist()
    [1.0, 2.0, 3.0]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "DiffArray",
    "Tape",
    "AdamWState",
    "parameter",
    "constant",
    "no_grad",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "abs_",
    "power",
    "clip",
    "sum_",
    "mean",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "take",
    "softmax",
    "layernorm",
    "conv2d",
    "adamw_step",
]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class DiffArray:
    """An n-d float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "_grad", "node", "requires_grad", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.node: tuple[Tape, int] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: ``g`` may be shared with another input's gradient
        g = np.asarray(g, dtype=np.float64).reshape(self.shape)
        self._grad = g if self._grad is None else self._grad + g

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        if isinstance(other, DiffArray):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Op:
    name: str
    inputs: tuple[DiffArray, ...]
    out: DiffArray
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the ops executed since the tape became active.

    Use as a context manager to scope a forward pass::

        with Tape() as tape:
            loss = model(x)
            backward(loss)
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def reset(self) -> None:
        for op in self.ops:
            op.out.node = None
        self.ops.clear()

    def _append(self, op: _Op) -> int:
        self.ops.append(op)
        return len(self.ops) - 1


def current_tape() -> Tape:
    return _tape_stack()[-1]


class no_grad:
    """Context manager that disables recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev


def parameter(data, name: str | None = None) -> DiffArray:
    return DiffArray(data, requires_grad=True, name=name)


def constant(data) -> DiffArray:
    return DiffArray(data, requires_grad=False)


def _wrap(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(name: str, data: np.ndarray, inputs: tuple[DiffArray, ...], bwd) -> DiffArray:
    needs = _grad_enabled() and any(x.requires_grad for x in inputs)
    out = DiffArray(data, requires_grad=needs)
    if needs:
        tape = current_tape()
        out.node = (tape, tape._append(_Op(name, inputs, out, bwd)))
    return out


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every array reachable from ``loss``.

    Gradients add onto whatever is already stored, so calling twice without
    ``zero_grad`` doubles them.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if not loss.requires_grad:
            raise ContractError("loss is not on a tape and does not require grad")
        loss._accumulate(seed)
        return
    tape, last = loss.node
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for op in reversed(tape.ops[: last + 1]):
        g = pending.pop(id(op.out), None)
        if g is None:
            continue
        op.out._accumulate(g)
        for x, gx in zip(op.inputs, op.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            if x.node is None or x.node[0] is not tape:
                x._accumulate(gx)
            elif id(x) in pending:
                pending[id(x)] = pending[id(x)] + gx
            else:
                pending[id(x)] = gx


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------


def _check_broadcast(a: DiffArray, b: DiffArray) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, x: DiffArray) -> np.ndarray:
    if g.shape == x.shape:
        return g
    return np.full(x.shape, g.sum())


def _operands(a: DiffArray, b: DiffArray):
    """Values to combine plus the result shape, collapsing single-element operands."""
    _check_broadcast(a, b)
    if a.shape == b.shape:
        return a.data, b.data, a.shape
    if a.size == 1 and (b.size != 1 or b.ndim >= a.ndim):
        return a.data.reshape(()), b.data, b.shape
    return a.data, b.data.reshape(()), a.shape


def add(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    av, bv, shape = _operands(a, b)
    data = np.broadcast_to(av + bv, shape).copy()
    return _make("add", data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> DiffArray:
    return add(a, neg(b))


def mul(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    av, bv, shape = _operands(a, b)
    data = np.broadcast_to(av * bv, shape).copy()

    def bwd(g):
        return _unbroadcast(g * bv, a), _unbroadcast(g * av, b)

    return _make("mul", data, (a, b), bwd)


def neg(a) -> DiffArray:
    a = _wrap(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> DiffArray:
    a = _wrap(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> DiffArray:
    a = _wrap(a)
    s = _sigmoid_np(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a) -> DiffArray:
    a = _wrap(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> DiffArray:
    a = _wrap(a)
    e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def abs_(a) -> DiffArray:
    a = _wrap(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a, p: float) -> DiffArray:
    a = _wrap(a)
    p = float(p)
    return _make("power", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clip(a, lo: float, hi: float) -> DiffArray:
    """Clamp to [lo, hi]; the gradient is zero where clamping was active."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "neg": neg,
    "exp": exp,
    "abs": abs_,
}


def elementwise(op: str, *args) -> DiffArray:
    """Dispatch an element-wise op by name (``add``, ``mul``, ``relu``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown element-wise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _wrap(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", data, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> DiffArray:
    a = _wrap(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> DiffArray:
    a = _wrap(a)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = tuple(_wrap(x) for x in arrays)
    try:
        data = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in arrays]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _make("concat", data, arrays, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a, indices, axis: int = 0) -> DiffArray:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * (axis % a.ndim) + (idx,), g)
        return (out,)

    return _make("take", np.take(a.data, idx, axis=axis), (a,), bwd)


def _getitem(a: DiffArray, index) -> DiffArray:
    def bwd(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)

    return _make("getitem", np.array(a.data[index]), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> DiffArray:
    """Matrix product with optional equal leading batch dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        da_ = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        db_ = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return da_, db_

    return _make("matmul", a.data @ b.data, (a, b), bwd)


def linear(x, w, b=None) -> DiffArray:
    """``x @ w + b`` over the last axis; ``w`` is (in, out), ``b`` is (out,)."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    inputs: tuple[DiffArray, ...] = (x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
        inputs = (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        dx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        grads = [dx, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make("linear", out.reshape(x.shape[:-1] + (w.shape[1],)), inputs, bwd)


def softmax(x, axis: int = -1) -> DiffArray:
    """Numerically stable softmax (max subtracted per slice)."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[-1]
    if c < 2:
        raise DimensionError(f"layernorm needs at least 2 channels, got {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm affine shapes {gamma.shape}, {beta.shape} vs {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layernorm", xhat * gamma.data + beta.data, (x, gamma, beta), bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> DiffArray:
    """2-D cross-correlation of (N, Cin, H, W) with (Cout, Cin, k, k) via im2col."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {k} larger than padded input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    inputs: tuple[DiffArray, ...] = (x, w)
    if b is not None:
        b = _wrap(b)
        out = out + b.data
        inputs = (x, w, b)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding : padding + h, padding : padding + wd]
        grads = [dx, (g2.T @ cols).reshape(w.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return _make("conv2d", data, inputs, bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    params: Sequence[DiffArray],
    grads: Iterable[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One AdamW update in place (weight decay decoupled from the moments)."""
    grads = list(grads)
    if len(grads) != len(params):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
