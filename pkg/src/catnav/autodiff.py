"""Dense-tensor reverse-mode autodiff on flat numpy arrays.

Every operation records a backward closure on a tape; ``backprop`` walks the
tape in reverse topological order with a deterministic ordering fixed by graph
construction.  Two precision modes exist: float64 (default, used by all
verification tests) and float32 (opt-in, for training speed).  Non-finite
values anywhere are a hard error.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_DTYPE = np.float64
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """A tensor or gradient contained NaN/Inf."""


def set_precision(mode: str) -> None:
    """Switch the global dtype: "float64" (verification) or "float32" (training)."""
    global _DTYPE
    if mode not in ("float64", "float32"):
        raise ValueError(f"unknown precision mode {mode!r}")
    _DTYPE = np.float64 if mode == "float64" else np.float32


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (rollout collection, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable-by-convention n-d array node.

    Only ``ParamStore`` members are mutated in place (by the optimizer and by
    ``zero_grad``); everything else is write-once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=""):
        arr = np.asarray(data, dtype=_DTYPE)
        _require_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        _require_finite(g, f"gradient of {self.name or 'tensor'}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, name="") -> Tensor:
    """Create an op output; record the tape edge only when gradients can flow."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward, name=name)
    return Tensor(data, name=name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw, "mul")


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def bw(g):
        if a.requires_grad:
            a._accum(g * s)

    return _node(a.data * s, (a,), bw, "scale")


def matmul(a, b) -> Tensor:
    """Matrix product; operands must share leading (batch) dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"matmul rank mismatch {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accum(a.data.swapaxes(-1, -2) @ g)

    return _node(out_data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b) with x of shape (..., d_in); leading dims are flattened."""
    x, w = _wrap(x), _wrap(w)
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(f"linear shape mismatch {x.data.shape} @ {w.data.shape}")
    lead = x.data.shape[:-1]
    xf = x.data.reshape(-1, d_in)
    out_data = xf @ w.data
    if b is not None:
        b = _wrap(b)
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accum((gf @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            w._accum(xf.T @ gf)
        if b is not None and b.requires_grad:
            b._accum(gf.sum(axis=0))

    return _node(out_data.reshape(lead + (d_out,)), parents, bw, "linear")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _wrap(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g.swapaxes(i, j))

    return _node(a.data.swapaxes(i, j).copy(), (a,), bw, "swapaxes")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                p._accum(g[tuple(idx)])
            offset += n

    return _node(out_data, tuple(parts), bw, "concat")


def slice_axis(a, axis: int, start: int, stop: int | None = None, step: int = 1) -> Tensor:
    a = _wrap(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop, step)
    idx = tuple(idx)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accum(buf)

    return _node(a.data[idx].copy(), (a,), bw, "slice")


def take_rows(table, indices) -> Tensor:
    """Embedding lookup: rows ``indices`` of a 2-d table."""
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("take_rows expects a 1-d index list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"row index out of range for table {table.data.shape}")

    def bw(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table._accum(buf)

    return _node(table.data[idx], (table,), bw, "take_rows")


def take_per_row(x, indices) -> Tensor:
    """Pick x[i, indices[i]] from a 2-d tensor."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.data.shape[0]
    rows = np.arange(n)

    def bw(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, (rows, idx), g)
            x._accum(buf)

    return _node(x.data[rows, idx].copy(), (x,), bw, "take_per_row")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(ge, a.data.shape).copy())

    return _node(out_data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# pointwise


def _unary(a, out_data, dfn, name):
    a = _wrap(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g * dfn())

    return _node(out_data, (a,), bw, name)


def gelu(a) -> Tensor:
    """Exact Gaussian-error nonlinearity: x * Phi(x)."""
    a = _wrap(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * phi
    return _unary(a, out_data,
                  lambda: phi + a.data * np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI,
                  "gelu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda: 1.0 - t * t, "tanh")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, s, lambda: s * (1.0 - s), "sigmoid")


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda: e, "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data, "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    r = np.sqrt(a.data)
    return _unary(a, r, lambda: 0.5 / r, "sqrt")


def square(a) -> Tensor:
    a = _wrap(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data, "square")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)
    return _unary(a, out_data,
                  lambda: ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype),
                  "clamp")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    return _node(out_data, (a, b), bw, "minimum")


def stop_gradient(a) -> Tensor:
    a = _wrap(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# fused layers


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d < 1:
        raise ValueError("layer_norm needs a nonempty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum((dxhat - m1 - xhat * m2) * inv)

    return _node(out_data, (x, gain, bias), bw, "layer_norm")


def masked_softmax(scores, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0.

    ``mask`` is a constant boolean array broadcastable to ``scores``.
    """
    scores = _wrap(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: fully masked row")
    m = np.max(np.where(mask, scores.data, -np.inf), axis=-1, keepdims=True)
    e = np.where(mask, np.exp(scores.data - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if scores.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            scores._accum(p * (g - inner))

    return _node(p, (scores,), bw, "masked_softmax")


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse

    def bw(g):
        if x.requires_grad:
            x._accum(g - np.exp(out_data) * g.sum(axis=-1, keepdims=True))

    return _node(out_data, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# parameters and backprop


class ParamStore:
    """Named parameter tensors with a fixed registration order.

    Gradient accumulation and optimizer traversal both follow registration
    order, which pins determinism.  ``trainable`` marks parameters the
    optimizer may update; frozen parameters still take part in forward passes.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=get_dtype()), requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            src = arrays[n]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n!r}: {src.shape} vs {t.data.shape}")
            t.data[...] = src


def backprop(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into ``.grad`` fields."""
    if loss.data.shape != ():
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.data.shape}")
    _require_finite(loss.data, "loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accum(np.ones((), dtype=loss.data.dtype))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
