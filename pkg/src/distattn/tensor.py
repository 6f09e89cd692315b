"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive below computes its forward value with numpy and, when any
input requires a gradient, attaches a closure mapping the output gradient
to one gradient per input. ``backward`` replays those closures in reverse
topological order.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "no_grad",
    "grad_enabled",
    "finite_diff_check",
    "corrupt_grad",
    "layer_norm",
    "softmax",
    "log_softmax",
    "activation",
    "relu",
    "gelu",
    "sigmoid",
    "reglu",
    "swiglu",
    "cross_entropy",
    "embedding",
    "make_rng",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` keys give independent substreams."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else data
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data, copy=False)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- graph replay ------------------------------------------------------------


class Graph:
    """Recorded operations reachable from ``root``, in topological order."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
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
        self.root = root
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n._backward is not None]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    graph = graph if graph is not None else Graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad += g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg


# -- elementwise and structural primitives ---------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = _wrap(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(x) -> Tensor:
    x = _wrap(x)
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def power(x, p: float) -> Tensor:
    x = _wrap(x)
    xd = x.data
    return _result(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),), "pow")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(shape[a] for a in axes)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=()) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw, "getitem")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; the backward pass scatters with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "gather")


# -- fused neural-network primitives ----------------------------------------


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with the biased variance, then scale and shift."""
    x = _wrap(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("layer_norm received non-finite input")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gain is None else gain.data
    out = xhat if gd is None else xhat * gd
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def bw(g):
        dxhat = g if gd is None else g * gd
        dx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, xd.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, parents, bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax received non-finite input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(
        out,
        (x,),
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
        "log_softmax",
    )


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of -log p(target) over all leading positions.

    ``weights`` (same shape as ``targets``) selects which positions count;
    the mean divides by the total weight.
    """
    logits = _wrap(logits)
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / total)[..., None] * g,)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


def relu(x) -> Tensor:
    x = _wrap(x)
    xd = x.data
    return _result(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    x = _wrap(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _result(xd * cdf, (x,), bw, "gelu")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = special.expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _split_halves(xd: np.ndarray):
    d = xd.shape[-1]
    if d % 2:
        raise ValueError(f"gated activation needs an even last axis, got {d}")
    h = d // 2
    return xd[..., :h], xd[..., h:]


def reglu(x) -> Tensor:
    """value * max(0, gate), with value/gate the two halves of the last axis."""
    x = _wrap(x)
    v, gate = _split_halves(x.data)
    act = np.maximum(gate, 0.0)

    def bw(g):
        return (np.concatenate([g * act, g * v * (gate > 0)], axis=-1),)

    return _result(v * act, (x,), bw, "reglu")


def swiglu(x) -> Tensor:
    """value * gate * sigmoid(gate)."""
    x = _wrap(x)
    v, gate = _split_halves(x.data)
    s = special.expit(gate)
    swish = gate * s

    def bw(g):
        dswish = s + gate * s * (1.0 - s)
        return (np.concatenate([g * swish, g * v * dswish], axis=-1),)

    return _result(v * swish, (x,), bw, "swiglu")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "reglu": reglu, "swiglu": swiglu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def is_gated(kind: str) -> bool:
    return kind.lower() in ("reglu", "swiglu")


# -- verification -------------------------------------------------------------


def finite_diff_check(f, x: Tensor, h: float = 1e-5, indices=None, floor: float = 1e-12) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps ``x`` to a scalar Tensor. ``x.data`` is perturbed in place and
    restored. ``indices`` (flat positions) restricts which coordinates are
    probed; by default every coordinate is. ``floor`` is added to each
    denominator, so entries far below it are compared in absolute terms
    (central differences carry ~1e-11 absolute noise).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x.grad = None
    with _enable_grad():
        loss = f(x)
        backward(loss)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("finite_diff_check needs a contiguous tensor")
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - central) / (abs(a) + abs(central) + floor)
            worst = max(worst, err)
    return worst


def corrupt_grad(x, index: int, factor: float = 1.1) -> Tensor:
    """Identity whose backward scales one flat gradient entry by ``factor``.

    Exists as a negative control for ``finite_diff_check``.
    """
    x = _wrap(x)

    def bw(g):
        g = np.array(g, dtype=np.float64)
        g.reshape(-1)[index] *= factor
        return (g,)

    return _result(x.data.copy(), (x,), bw, "corrupt_grad")


@contextlib.contextmanager
def _enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev
