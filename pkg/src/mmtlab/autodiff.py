"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation executes eagerly in numpy and, when a :class:`Tape` is
active, records itself so gradients can be replayed. Replaying the tape in
reverse recording order is a reverse topological order by construction
(an op's inputs always precede it), and gradients accumulate additively at
fan-out nodes. Ops executed with no active tape compute values only, which
is the inference path.

All data is float64. A non-finite value anywhere is an error state; enable
``set_debug_checks(True)`` to scan every op output (tests do), otherwise
callers check at natural boundaries such as the loss.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Scan every op output for NaN/Inf. Slow; meant for tests."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops for one backward pass.

    Use as a context manager around a forward computation, then call
    :meth:`backward` on the scalar loss. A tape must not be shared across
    threads; independent tapes may run concurrently as long as they do not
    update the same parameters simultaneously.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(node) into ``.grad`` of every antecedent."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Tensor:
    """Dense float64 array plus gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "inputs", "_backward")

    def __init__(self, data, inputs=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.inputs: tuple[Tensor, ...] = inputs
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            if g.shape == self.data.shape:
                # callers may reuse their buffer, so copy rather than alias
                self.grad = g.copy()
                return
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Accumulate a gradient buffer the caller will never touch again.

        Skips the defensive copy of :meth:`accumulate`; only pass arrays
        freshly allocated inside a single backward closure, never the
        incoming upstream gradient or a view of it.
        """
        if self.grad is None and g.shape == self.data.shape and g.flags.writeable:
            self.grad = g
        else:
            self.accumulate(g)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    if _ACTIVE_TAPE is not None and out._backward is not None:
        _ACTIVE_TAPE.nodes.append(out)
    else:
        # outside a tape the graph is not retained
        out.inputs = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return _record(out)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))

    out._backward = backward
    return _record(out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        a.accumulate_owned(_unbroadcast(g * b.data, a.shape))
        b.accumulate_owned(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return _record(out)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, (a,))

    def backward(g):
        a.accumulate_owned(g * s)

    out._backward = backward
    return _record(out)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, (a,))

    def backward(g):
        a.accumulate_owned(g * y)

    out._backward = backward
    return _record(out)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))

    def backward(g):
        a.accumulate_owned(g / a.data)

    out._backward = backward
    return _record(out)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, (a,))

    def backward(g):
        a.accumulate_owned(g * (1.0 - y * y))

    out._backward = backward
    return _record(out)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    inner = 0.044715 * x2
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner)
    y = 1.0 + t
    y *= x
    y *= 0.5
    out = Tensor(y, (a,))

    def backward(g):
        sech2 = 1.0 - t * t
        poly = (3 * 0.044715) * x2
        poly += 1.0
        poly *= sech2
        poly *= x
        poly *= _GELU_C
        poly += 1.0 + t
        poly *= 0.5
        poly *= g
        a.accumulate_owned(poly)

    out._backward = backward
    return _record(out)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def backward(g):
        a.accumulate(g.reshape(a.shape))

    out._backward = backward
    return _record(out)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), (a,))

    def backward(g):
        a.accumulate(g.transpose(inverse))

    out._backward = backward
    return _record(out)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))

    out._backward = backward
    return _record(out)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.accumulate(g[tuple(idx)])

    out._backward = backward
    return _record(out)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy(), (a,))

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate_owned(full)

    out._backward = backward
    return _record(out)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a.accumulate_owned(np.broadcast_to(g, a.shape) / count)

    out._backward = backward
    return _record(out)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a.accumulate_owned(np.broadcast_to(g, a.shape).copy())

    out._backward = backward
    return _record(out)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample row gather: out[b, i] = a[b, idx[b, i]] over the last axis.

    ``a`` is (batch, n, d) and ``idx`` is (batch, k) of row indices; the
    backward pass scatter-adds, so repeated indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows: got {a.shape} indexed by {idx.shape}")
    batch_ix = np.arange(a.shape[0])[:, None]
    out = Tensor(a.data[batch_ix, idx], (a,))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch_ix, idx), g)
        a.accumulate_owned(full)

    out._backward = backward
    return _record(out)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a[rows[i], cols[i]] for each i; used to pull label logits."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(a.data[rows, cols], (a,))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a.accumulate_owned(full)

    out._backward = backward
    return _record(out)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes.

    Gradient contract for 2-D operands: d/da = g @ b.T, d/db = a.T @ g;
    batched cases reduce over broadcast axes.
    """
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def backward(g):
        a.accumulate_owned(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b.accumulate_owned(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out._backward = backward
    return _record(out)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b). Fused for tape brevity."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y, (x, w) if b is None else (x, w, b))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        x.accumulate_owned((g2 @ w.data.T).reshape(x.shape))
        w.accumulate_owned(x2.T @ g2)
        if b is not None:
            b.accumulate_owned(g2.sum(axis=0))

    out._backward = backward
    return _record(out)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (x,))

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_owned(y * (g - inner))

    out._backward = backward
    return _record(out)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, (x,))

    def backward(g):
        sm = np.exp(y)
        x.accumulate_owned(g - sm * g.sum(axis=axis, keepdims=True))

    out._backward = backward
    return _record(out)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match last axis {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, (x, gain, bias))

    def backward(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        x.accumulate_owned(inv * (gh - m1 - xhat * m2))
        axes = tuple(range(g.ndim - 1))
        gain.accumulate_owned((g * xhat).sum(axis=axes))
        bias.accumulate_owned(g.sum(axis=axes))

    out._backward = backward
    return _record(out)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, w_out: Tensor) -> Tensor:
    """Scaled dot-product attention per head, concatenated, output-projected.

    q, k, v are already-projected sequences shaped (..., n, d) with d
    divisible by ``heads``; w_out is the (d, d) output projection.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"embedding dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(t: Tensor) -> Tensor:
        # (..., n, d) -> (..., heads, n, hd)
        n = t.shape[-2]
        r = reshape(t, t.shape[:-2] + (n, heads, hd))
        order = tuple(range(r.data.ndim))
        return transpose(r, order[:-3] + (order[-2], order[-3], order[-1]))

    qh, kh, vh = split(q), split(k), split(v)
    kt = transpose(kh, tuple(range(kh.data.ndim - 2)) + (kh.data.ndim - 1, kh.data.ndim - 2))
    att = softmax(scale(matmul(qh, kt), 1.0 / math.sqrt(hd)), axis=-1)
    mixed = matmul(att, vh)  # (..., heads, n, hd)
    order = tuple(range(mixed.data.ndim))
    merged = transpose(mixed, order[:-3] + (order[-2], order[-3], order[-1]))
    merged = reshape(merged, q.shape)
    return linear(merged, w_out)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of w[label] * (-log softmax(logits)[label])."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])
    picked = pick(lp, rows, labels)
    if weights is not None:
        picked = mul(picked, Tensor(-np.asarray(weights, dtype=np.float64)[labels]))
    else:
        picked = scale(picked, -1.0)
    return mean(picked)
