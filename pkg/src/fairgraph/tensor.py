"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Only the operations the GCN link predictor and the MPNN denoiser need are
provided. Every op returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a closure that maps the output
gradient to input gradients. :func:`backward` orders the recorded graph into a
:class:`Tape` and runs those closures in reverse.

Gradients accumulate into ``.grad`` of leaf tensors across calls, so calling
``backward`` twice without :meth:`Tensor.zero_grad` doubles them exactly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "backward",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tsum",
    "mean",
    "tabs",
    "relu",
    "sigmoid",
    "softmax_rows",
    "layernorm_rows",
    "activation",
    "transpose",
    "reshape",
    "take_rows",
    "take_block",
    "concat_rows",
    "split_cols",
    "row_mean_aggregate",
    "pairs_to_symmetric",
    "bce_with_logits",
    "glorot",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return tabs(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, records: list[Tensor] | None = None):
        self.records: list[Tensor] = records or []

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, t: Tensor) -> bool:
        return any(r is t for r in self.records)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.trace(loss)
    elif loss not in tape:
        raise ValueError("loss is not recorded on the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- arithmetic

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(out, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# -------------------------------------------------------------- activations

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def layernorm_rows(a, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[1] < 2:
        raise ValueError(f"layernorm needs rows of length >= 2, got shape {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), bw, "layernorm")


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "layernorm_rows": layernorm_rows,
}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ------------------------------------------------------------------- shaping

def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices scatter-add in backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "take_rows")


def take_block(a, idx) -> Tensor:
    """Square sub-block ``a[idx][:, idx]`` of a matrix (``idx`` without repeats)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    ix = np.ix_(idx, idx)

    def bw(g):
        out = np.zeros_like(a.data)
        out[ix] = g
        return (out,)

    return _make(a.data[ix], (a,), bw, "take_block")


def concat_rows(parts: Sequence) -> Tensor:
    """Join per-row feature blocks side by side (the ``[h || s]`` operator)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ValueError(f"concat_rows shape mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat")


def split_cols(a, widths: Iterable[int]) -> list[Tensor]:
    a = _as_tensor(a)
    widths = list(widths)
    if sum(widths) != a.shape[1]:
        raise ValueError(f"widths {widths} do not cover {a.shape[1]} columns")
    out, start = [], 0
    for w in widths:
        sl = slice(start, start + w)

        def bw(g, sl=sl):
            full = np.zeros_like(a.data)
            full[:, sl] = g
            return (full,)

        out.append(_make(a.data[:, sl], (a,), bw, "split"))
        start += w
    return out


def row_mean_aggregate(adjacency, h) -> Tensor:
    """Mean of neighbour rows, ``D^-1 A h``; isolated nodes get a zero row."""
    h = _as_tensor(h)
    adj = np.asarray(adjacency, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[1] != h.shape[0]:
        raise ValueError(f"aggregate shape mismatch: adjacency {adj.shape}, h {h.shape}")
    deg = adj.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    norm = adj * inv[:, None]
    return matmul(norm, h)


def pairs_to_symmetric(values, n: int, rows, cols) -> Tensor:
    """Place per-pair values at ``(rows, cols)`` and ``(cols, rows)`` of a zero ``n x n`` matrix.

    Pairs must be distinct off-diagonal entries listed once each.
    """
    v = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if v.shape != rows.shape or rows.shape != cols.shape:
        raise ValueError(f"pair arrays disagree: values {v.shape}, rows {rows.shape}, cols {cols.shape}")
    out = np.zeros((n, n))
    out[rows, cols] = v.data
    out[cols, rows] = v.data

    def bw(g):
        return (g[rows, cols] + g[cols, rows],)

    return _make(out, (v,), bw, "pairs_to_symmetric")


# --------------------------------------------------------------------- losses

def bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw scores, computed stably."""
    z = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"targets {y.shape} do not match logits {z.shape}")
    x = z.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    if reduction == "sum":
        scale = 1.0
    elif reduction == "mean":
        scale = 1.0 / max(per.size, 1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    p = _sigmoid(x)

    def bw(g):
        return (g * scale * (p - y),)

    return _make(per.sum() * scale, (z,), bw, "bce")


# -------------------------------------------------------------- optimization

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
