"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tape records every differentiable op in execution order while active;
``Tape.backward`` replays the records in exact reverse order, accumulating
(summing) gradients across fan-out. Tapes are rebuilt per forward pass and
are single-threaded; independent tapes may live on different threads.

All tensors are float64. Parameters are initialized uniform(-r, r) with
r = 1/sqrt(fan_in) from a caller-supplied numpy Generator so that every
source of randomness flows from one root seed.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the graph bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of differentiable ops; context manager activates it."""

    def __init__(self):
        self._records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def _record(self, out: Tensor) -> None:
        self._records.append(out)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every reachable tensor.

        Records after (or disconnected from) the loss contribute nothing:
        their output grad is never seeded, so they are skipped. Tensors not
        on a path to the loss keep grad None, which reads as zero.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out in reversed(self._records):
            if out.grad is None or out._backward is None:
                continue
            out._backward(out.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
        tape._record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ad, bd = a.data, b.data
        a1 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b1 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g1 = g
        if ad.ndim == 1:
            g1 = np.expand_dims(g1, -2)
        if bd.ndim == 1:
            g1 = np.expand_dims(g1, -1)
        ga = np.matmul(g1, np.swapaxes(b1, -1, -2))
        gb = np.matmul(np.swapaxes(a1, -1, -2), g1)
        _accumulate(a, _unbroadcast(ga, a1.shape).reshape(ad.shape))
        _accumulate(b, _unbroadcast(gb, b1.shape).reshape(bd.shape))

    return _make(data, (a, b), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def logaddexp(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.logaddexp(a.data, b.data)

    def backward(g):
        # exp(x - out) is the softmax weight of x; guard the -inf/-inf cell
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(data), 0.0, np.exp(a.data - data))
            wb = np.where(np.isneginf(data), 0.0, np.exp(b.data - data))
        _accumulate(a, _unbroadcast(g * wa, a.shape))
        _accumulate(b, _unbroadcast(g * wb, b.shape))

    return _make(data, (a, b), backward)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtraction)."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("softmax on empty input")
    data = _softmax_np(a.data, axis)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Fused stable log-softmax (max-subtraction + log-sum-exp)."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("log_softmax on empty input")
    data = _log_softmax_np(a.data, axis)

    def backward(g):
        sm = np.exp(data)
        _accumulate(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(data, (a,), backward)


def tmean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)

    return _make(data, tuple(parts), backward)


def getitem(a, idx) -> Tensor:
    """Indexing with ints, slices, or integer arrays; backward scatter-adds."""
    a = _as_tensor(a)
    data = a.data[idx]
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def backward(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, idx, g)
        else:
            ga[idx] += g
        _accumulate(a, ga)

    return _make(data, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """A detached copy sharing the forward value."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# Recurrent cells
# ---------------------------------------------------------------------------


def lstm_cell(x, h, c, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step from tape ops; params = {"wx", "wh", "b"}.

    Gate order within the fused 4H projection: input, forget, cell, output.
    Returns (h_next, c_next). This is the reference path; `lstm_layer` runs
    the same math through the fused sequence kernel.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    wx, wh, b = params["wx"], params["wh"], params["b"]
    if x.shape[-1] != wx.shape[0] or h.shape[-1] != wh.shape[0]:
        raise ShapeError(
            f"lstm_cell dims: x {x.shape} vs wx {wx.shape}, h {h.shape} vs wh {wh.shape}"
        )
    hsize = wh.shape[0]
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(z[..., 0 * hsize : 1 * hsize])
    f = sigmoid(z[..., 1 * hsize : 2 * hsize])
    g = tanh(z[..., 2 * hsize : 3 * hsize])
    o = sigmoid(z[..., 3 * hsize : 4 * hsize])
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def lstm_layer(x_seq, params: dict) -> Tensor:
    """Full-sequence LSTM layer (zero initial state) via the fused kernel.

    x_seq: (T, D) -> (T, H). Forward and backward both run in
    kernels.lstm_seq_forward/backward; gradients flow to x_seq and params.
    """
    x_seq = _as_tensor(x_seq)
    wx, wh, b = params["wx"], params["wh"], params["b"]
    if x_seq.ndim != 2 or x_seq.shape[1] != wx.shape[0]:
        raise ShapeError(f"lstm_layer input {x_seq.shape} vs wx {wx.shape}")
    hsize = wh.shape[0]
    h0 = np.zeros(hsize)
    c0 = np.zeros(hsize)
    h_seq, c_seq, gates = kernels.lstm_seq_forward(
        np.ascontiguousarray(x_seq.data), h0, c0, wx.data, wh.data, b.data
    )

    def backward(g):
        dx, dwx, dwh, db, _, _ = kernels.lstm_seq_backward(
            np.ascontiguousarray(g),
            np.ascontiguousarray(x_seq.data),
            h0,
            c0,
            wx.data,
            wh.data,
            h_seq,
            c_seq,
            gates,
        )
        _accumulate(x_seq, dx)
        _accumulate(wx, dwx)
        _accumulate(wh, dwh)
        _accumulate(b, db)

    return _make(h_seq, (x_seq, wx, wh, b), backward)


# ---------------------------------------------------------------------------
# Verification and initialization helpers
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate uses |a - b| / max(1, |a|, |b|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(y)
    analytic = (
        np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)
    )
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = f(x).item()
        flat[j] = orig - eps
        lo = f(x).item()
        flat[j] = orig
        nflat[j] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Parameter tensor ~ uniform(-r, r), r = 1/sqrt(fan_in)."""
    r = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
