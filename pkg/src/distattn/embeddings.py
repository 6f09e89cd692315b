"""Analytic coordinate embeddings and LayerNorm dot-product oracles.

For the three 4-d embeddings of a scalar coordinate

    trig(x) = ( cos x, -cos x,  sin x, -sin x)
    lin(x)  = ( 1,     -1,      x,     -x    )
    quad(x) = ( 1-x²/2, -(1-x²/2), x,  -x    )

``LN(E(x1)) . LN(E(x2))`` is approximately ``-2 (x1-x2)^2 + 4`` for small
inputs; trig gives ``4 cos(x1 - x2)`` exactly. The closed forms below are
checked against the numerical LayerNorm in :mod:`distattn.tensor`.

For ``n`` spatial dimensions, lin and quad extend to ``2n + 2`` components:
a shared (c, -c) pair (c = 1 or 1 - |x|²/2) followed by (x_k, -x_k) for
every axis. The constants become a = n + 1 and b = 2 (n + 1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EmbeddingKind(str, enum.Enum):
    TRIG = "trig"
    LIN = "lin"
    QUAD = "quad"


@dataclass(frozen=True)
class ApproxConstants:
    a: float
    b: float


def approx_constants(n: int = 1) -> ApproxConstants:
    return ApproxConstants(a=float(n + 1), b=float(2 * (n + 1)))


def _kind(kind) -> EmbeddingKind:
    return kind if isinstance(kind, EmbeddingKind) else EmbeddingKind(str(kind).lower())


def embed(x, kind) -> np.ndarray:
    """4-vector embedding of scalar(s) ``x``; output shape ``x.shape + (4,)``."""
    kind = _kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is EmbeddingKind.TRIG:
        c, s = np.cos(x), np.sin(x)
        return np.stack([c, -c, s, -s], axis=-1)
    if kind is EmbeddingKind.LIN:
        one = np.ones_like(x)
        return np.stack([one, -one, x, -x], axis=-1)
    q = 1.0 - 0.5 * x * x
    return np.stack([q, -q, x, -x], axis=-1)


def embed_nd(x, kind) -> np.ndarray:
    """(2n+2)-vector embedding of points ``x`` with shape (..., n); lin/quad only."""
    kind = _kind(kind)
    if kind is EmbeddingKind.TRIG:
        raise ValueError("the n-dimensional construction is defined for lin and quad only")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] > 4:
        raise ValueError("n-dimensional embeddings are provided for n <= 4")
    c = np.ones(x.shape[:-1]) if kind is EmbeddingKind.LIN else 1.0 - 0.5 * (x * x).sum(axis=-1)
    axes = np.stack([x, -x], axis=-1).reshape(*x.shape[:-1], 2 * x.shape[-1])
    return np.concatenate([np.stack([c, -c], axis=-1), axes], axis=-1)


def ln_dot_exact(x1, x2, kind) -> np.ndarray:
    """Closed-form ``LN(E(x1)) . LN(E(x2))`` (LayerNorm without eps, gain or bias)."""
    kind = _kind(kind)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if kind is EmbeddingKind.TRIG:
        return 4.0 * np.cos(x1 - x2)
    if kind is EmbeddingKind.LIN:
        return 4.0 * (1.0 + x1 * x2) / np.sqrt((1.0 + x1 * x1) * (1.0 + x2 * x2))
    q1, q2 = 1.0 - 0.5 * x1 * x1, 1.0 - 0.5 * x2 * x2
    # q^2 + x^2 = 1 + x^4/4, so sigma = sqrt((1 + x^4/4) / 2)
    return 4.0 * (q1 * q2 + x1 * x2) / np.sqrt((1.0 + 0.25 * x1**4) * (1.0 + 0.25 * x2**4))


def ln_dot_exact_nd(x, y, kind) -> np.ndarray:
    """Closed form for the (2n+2)-component embeddings; x, y have shape (..., n)."""
    kind = _kind(kind)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[-1]
    xy = (x * y).sum(axis=-1)
    xx, yy = (x * x).sum(axis=-1), (y * y).sum(axis=-1)
    if kind is EmbeddingKind.LIN:
        return 2.0 * (n + 1) * (1.0 + xy) / np.sqrt((1.0 + xx) * (1.0 + yy))
    if kind is EmbeddingKind.QUAD:
        qx, qy = 1.0 - 0.5 * xx, 1.0 - 0.5 * yy
        return 2.0 * (n + 1) * (qx * qy + xy) / np.sqrt((1.0 + 0.25 * xx * xx) * (1.0 + 0.25 * yy * yy))
    raise ValueError("the n-dimensional construction is defined for lin and quad only")


def ln_dot_numeric(x1, x2, kind, c: float = 1.0) -> np.ndarray:
    """``c LN(E(x1/c)) . c LN(E(x2/c))`` through the autodiff LayerNorm (eps = 0)."""
    e1 = Tensor(embed(np.asarray(x1, dtype=np.float64) / c, kind))
    e2 = Tensor(embed(np.asarray(x2, dtype=np.float64) / c, kind))
    with T.no_grad():
        n1 = T.layer_norm(e1, eps=0.0).data
        n2 = T.layer_norm(e2, eps=0.0).data
    return c * c * (n1 * n2).sum(axis=-1)


def quadratic_target(x1, x2, n: int = 1) -> np.ndarray:
    k = approx_constants(n)
    d = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return -k.a * d * d + k.b


def _grid(x_range: float, grid: int) -> tuple[np.ndarray, np.ndarray]:
    if x_range <= 0 or grid < 2:
        raise ValueError("need x_range > 0 and grid >= 2")
    xs = np.linspace(-x_range, x_range, grid)
    return np.meshgrid(xs, xs, indexing="ij")


def approx_error(kind, x_range: float, grid: int = 101) -> float:
    """Sup-norm gap between the exact LN dot product and ``-2 (x1-x2)^2 + 4`` on a grid."""
    a, b = _grid(x_range, grid)
    return float(np.max(np.abs(ln_dot_exact(a, b, kind) - quadratic_target(a, b))))


def pointwise_excess(kind_a, kind_b, x_range: float, grid: int = 101) -> float:
    """Largest amount by which ``kind_a``'s pointwise error exceeds ``kind_b``'s on the grid."""
    a, b = _grid(x_range, grid)
    target = quadratic_target(a, b)
    ea = np.abs(ln_dot_exact(a, b, kind_a) - target)
    eb = np.abs(ln_dot_exact(a, b, kind_b) - target)
    return float(np.max(ea - eb))


def rescale_error(kind, c: float, x_range: float, grid: int = 101, numeric: bool = False) -> float:
    """Sup-norm gap of ``c LN(E(x1/c)) . c LN(E(x2/c))`` to ``c^2 (-2 ((x1-x2)/c)^2 + 4)``."""
    if c <= 0:
        raise ValueError("scale c must be positive")
    a, b = _grid(x_range, grid)
    approx = ln_dot_numeric(a, b, kind, c) if numeric else c * c * ln_dot_exact(a / c, b / c, kind)
    target = c * c * quadratic_target(a / c, b / c)
    return float(np.max(np.abs(approx - target)))


def rescale_sweep(kind, c_values, x_range: float, grid: int = 101) -> list[tuple[float, float]]:
    """``(c, sup error)`` for each scale; errors shrink as ``c`` grows."""
    c_values = [float(c) for c in c_values]
    if any(c <= 0 for c in c_values):
        raise ValueError("all scales must be positive")
    return [(c, rescale_error(kind, c, x_range, grid)) for c in c_values]


def glu_quadratic_identity(x: float, kind: str) -> float:
    """``|GLU(x) + GLU(-x) - x^2|`` with value = gate = x."""
    fn = {"reglu": T.reglu, "swiglu": T.swiglu}[kind.lower()]
    pos = fn(Tensor([x, x])).data[0]
    neg = fn(Tensor([-x, -x])).data[0]
    return abs(pos + neg - x * x)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    lx, ly = np.log(np.asarray(xs, dtype=np.float64)), np.log(np.asarray(ys, dtype=np.float64))
    return float(np.polyfit(lx, ly, 1)[0])


# -- the ``verify`` table -----------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    # "max" means value must stay <= tolerance, "min" means >= tolerance
    sense: str = "max"


def _max_check(name: str, value: float, tol: float) -> Check:
    return Check(name, float(value), tol, bool(value <= tol), "max")


def _min_check(name: str, value: float, tol: float) -> Check:
    return Check(name, float(value), tol, bool(value >= tol), "min")


ORDER_RANGES = (0.05, 0.1, 0.2, 0.4)
RESCALE_C = (1.0, 2.0, 4.0, 8.0, 16.0)


def identity_checks(grid: int = 201) -> list[Check]:
    """Every analytic identity, evaluated numerically."""
    xs = np.linspace(-math.pi / 4, math.pi / 4, grid)
    a, b = np.meshgrid(xs, xs, indexing="ij")
    checks = [
        _max_check("trig: numeric LN dot == 4cos(x1-x2)",
                   np.max(np.abs(ln_dot_numeric(a, b, "trig") - 4 * np.cos(a - b))), 1e-10),
        _max_check("lin: numeric LN dot == closed form",
                   np.max(np.abs(ln_dot_numeric(a, b, "lin") - ln_dot_exact(a, b, "lin"))), 1e-10),
        _max_check("quad: numeric LN dot == closed form",
                   np.max(np.abs(ln_dot_numeric(a, b, "quad") - ln_dot_exact(a, b, "quad"))), 1e-10),
    ]
    big = np.linspace(-30.0, 30.0, 601)
    for kind in ("reglu", "swiglu"):
        worst = max(glu_quadratic_identity(float(x), kind) for x in big)
        checks.append(_max_check(f"{kind}: GLU(x)+GLU(-x) == x^2, |x|<=30", worst, 1e-12))

    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 4):
        x, y = rng.uniform(-0.5, 0.5, size=(2, 200, n))
        for kind in ("lin", "quad"):
            ex, ey = Tensor(embed_nd(x, kind)), Tensor(embed_nd(y, kind))
            num = (T.layer_norm(ex, eps=0.0).data * T.layer_norm(ey, eps=0.0).data).sum(-1)
            checks.append(_max_check(f"{kind} n={n}: numeric LN dot == closed form",
                                     np.max(np.abs(num - ln_dot_exact_nd(x, y, kind))), 1e-10))

    lin_err = [approx_error("lin", r, grid) for r in ORDER_RANGES]
    checks.append(_min_check("lin: log-log error slope over x_range", loglog_slope(ORDER_RANGES, lin_err), 2.5))
    checks.append(_max_check("quad error <= lin error at every grid point",
                             max(pointwise_excess("quad", "lin", r, grid) for r in ORDER_RANGES), 1e-14))
    sweep = [e for _, e in rescale_sweep("lin", RESCALE_C, 1.0, grid)]
    checks.append(_max_check("lin: rescale error strictly decreasing in c",
                             max(e2 - e1 for e1, e2 in zip(sweep, sweep[1:])), -1e-300))
    numeric_gap = max(abs(rescale_error("lin", c, 1.0, grid) - rescale_error("lin", c, 1.0, grid, numeric=True))
                      for c in RESCALE_C)
    checks.append(_max_check("lin: rescale error closed form == numeric LN", numeric_gap, 1e-10))
    return checks


def error_curves(grid: int = 201) -> list[dict]:
    """Rows ``{kind, variable, value, sup_error}`` for the error-vs-range and error-vs-c curves."""
    rows = []
    for kind in ("trig", "lin", "quad"):
        for r in ORDER_RANGES:
            rows.append({"kind": kind, "variable": "x_range", "value": r, "sup_error": approx_error(kind, r, grid)})
    for kind in ("lin", "quad"):
        for c, err in rescale_sweep(kind, RESCALE_C, 1.0, grid):
            rows.append({"kind": kind, "variable": "c", "value": c, "sup_error": err})
    return rows
