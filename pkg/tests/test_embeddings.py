import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distattn import embeddings as E

small = st.floats(-0.5, 0.5, allow_nan=False)


def test_embed_values():
    np.testing.assert_array_equal(E.embed(0.0, "lin"), [1, -1, 0, 0])
    np.testing.assert_array_equal(E.embed(0.0, "trig"), [1, -1, 0, 0])
    np.testing.assert_allclose(E.embed(0.4, "quad"), [0.92, -0.92, 0.4, -0.4], atol=1e-15)


def test_embed_shape_broadcasts():
    assert E.embed(np.zeros((3, 2)), "trig").shape == (3, 2, 4)


def test_approx_constants():
    k = E.approx_constants()
    assert (k.a, k.b) == (2.0, 4.0)
    assert E.approx_constants(3) == E.ApproxConstants(4.0, 8.0)


def test_trig_equal_arguments_is_four():
    assert E.ln_dot_exact(0.37, 0.37, "trig") == 4.0


def test_lin_closed_form_value():
    # oracle: exact rational arithmetic for the numerator and radicand
    num = 4 * (1 + Fraction(1, 10) * Fraction(2, 10))
    rad = (1 + Fraction(1, 100)) * (1 + Fraction(4, 100))
    expected = float(num) / math.sqrt(float(rad))
    assert E.ln_dot_exact(0.1, 0.2, "lin") == pytest.approx(expected, rel=1e-15)
    assert E.ln_dot_exact(0.1, 0.2, "lin") == pytest.approx(3.98091, abs=5e-6)


@pytest.mark.parametrize("kind", ["trig", "lin", "quad"])
def test_closed_form_matches_numeric_layer_norm(kind):
    xs = np.linspace(-0.8, 0.8, 41)
    a, b = np.meshgrid(xs, xs)
    gap = np.max(np.abs(E.ln_dot_numeric(a, b, kind) - E.ln_dot_exact(a, b, kind)))
    assert gap < 1e-10


@given(small, small)
def test_symmetry_all_kinds(x1, x2):
    for kind in ("trig", "lin", "quad"):
        assert E.ln_dot_exact(x1, x2, kind) == E.ln_dot_exact(x2, x1, kind)


@given(small, small)
def test_maximum_at_zero_distance(x, y):
    for kind in ("trig", "lin", "quad"):
        assert E.ln_dot_exact(x, x, kind) >= E.ln_dot_exact(x, y, kind) - 1e-15


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_trig_closed_form_is_cosine(x1, x2):
    assert abs(E.ln_dot_exact(x1, x2, "trig") - 4 * math.cos(x1 - x2)) <= 1e-12


# -- approximation errors ----------------------------------------------------------


def test_lin_error_regression_value():
    # frozen from the closed form (101-point grid over [-0.1, 0.1]^2); the
    # worst point is the corner pair (0.1, -0.1)
    assert E.approx_error("lin", 0.1, 101) == pytest.approx(0.0007920792079207928, rel=1e-12)
    corner = abs(4 * (1 - 0.01) / (1 + 0.01) - (-2 * 0.04 + 4))
    assert E.approx_error("lin", 0.1, 101) == pytest.approx(corner, rel=1e-12)


@pytest.mark.parametrize("kind", ["trig", "lin", "quad"])
def test_error_vanishes_as_range_shrinks(kind):
    errs = [E.approx_error(kind, r) for r in (0.4, 0.1, 0.025, 0.00625)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6


@pytest.mark.parametrize("r", [0.1, 0.25, 0.5])
def test_quad_no_worse_than_lin(r):
    assert E.approx_error("quad", r) <= E.approx_error("lin", r)
    assert E.pointwise_excess("quad", "lin", r) <= 1e-14


def test_lin_error_order_at_least_three():
    ranges = [0.05, 0.1, 0.2, 0.4]
    slope = E.loglog_slope(ranges, [E.approx_error("lin", r, 201) for r in ranges])
    assert slope >= 2.5


def test_grid_validation():
    with pytest.raises(ValueError):
        E.approx_error("lin", 0.0)
    with pytest.raises(ValueError):
        E.approx_error("lin", 0.1, grid=1)


# -- rescaling ------------------------------------------------------------------------


def test_rescale_monotone_and_vanishing():
    sweep = E.rescale_sweep("lin", [1, 2, 4, 8, 16, 1024], 1.0)
    errs = [e for _, e in sweep]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-4


def test_rescale_doubling_ratio_approaches_four_from_below():
    """The leading error term is quartic in 1/c, so doubling c multiplies the
    error by about 1/4 -- but the next term makes the ratio slightly smaller
    than 4 at every finite c (measured 2.5, 3.4, 3.8, 3.95 for c = 1..8)."""
    errs = [E.rescale_error("lin", c, 1.0) for c in (1, 2, 4, 8, 16, 32)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    assert all(r < 4.0 for r in ratios)
    assert ratios[-1] == pytest.approx(4.0, rel=0.01)


def test_rescale_closed_form_matches_numeric():
    for c in (1.0, 2.0, 4.0, 8.0, 16.0):
        assert abs(E.rescale_error("lin", c, 1.0) - E.rescale_error("lin", c, 1.0, numeric=True)) < 1e-10


def test_rescale_rejects_nonpositive_c():
    with pytest.raises(ValueError):
        E.rescale_error("lin", 0.0, 1.0)
    with pytest.raises(ValueError):
        E.rescale_sweep("lin", [1.0, -2.0], 1.0)


# -- GLU identity -----------------------------------------------------------------------


def test_glu_examples():
    assert E.glu_quadratic_identity(0.0, "reglu") == 0.0
    assert E.glu_quadratic_identity(3.0, "reglu") == 0.0
    assert E.glu_quadratic_identity(-7.5, "swiglu") < 1e-12


@given(st.floats(-30, 30))
def test_glu_identity_property(x):
    assert E.glu_quadratic_identity(x, "reglu") <= 1e-12
    assert E.glu_quadratic_identity(x, "swiglu") <= 1e-12


# -- n-dimensional construction ------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("kind", ["lin", "quad"])
def test_nd_closed_form_matches_numeric(n, kind):
    from distattn import tensor as T

    rng = np.random.default_rng(n)
    x, y = rng.uniform(-0.5, 0.5, size=(2, 50, n))
    ex = T.layer_norm(T.Tensor(E.embed_nd(x, kind)), eps=0.0).data
    ey = T.layer_norm(T.Tensor(E.embed_nd(y, kind)), eps=0.0).data
    np.testing.assert_allclose((ex * ey).sum(-1), E.ln_dot_exact_nd(x, y, kind), atol=1e-10)


def test_nd_reduces_to_1d():
    xs = np.linspace(-0.4, 0.4, 9)
    for kind in ("lin", "quad"):
        np.testing.assert_allclose(E.ln_dot_exact_nd(xs[:, None], xs[::-1, None], kind),
                                   E.ln_dot_exact(xs, xs[::-1], kind), atol=1e-14)


@pytest.mark.parametrize("n", [2, 3])
def test_nd_quadratic_approximation(n):
    k = E.approx_constants(n)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(-0.02, 0.02, size=(2, 100, n))
    d2 = ((x - y) ** 2).sum(-1)
    np.testing.assert_allclose(E.ln_dot_exact_nd(x, y, "lin"), -k.a * d2 + k.b, atol=1e-5)


def test_nd_rejects_trig_and_large_n():
    with pytest.raises(ValueError):
        E.embed_nd(np.zeros((2, 3)), "trig")
    with pytest.raises(ValueError):
        E.embed_nd(np.zeros((2, 5)), "lin")


def test_identity_table_all_pass():
    checks = E.identity_checks()
    failed = [c.name for c in checks if not c.passed]
    assert not failed


def test_error_curve_rows():
    rows = E.error_curves(grid=51)
    assert {r["variable"] for r in rows} == {"x_range", "c"}
    assert all(r["sup_error"] >= 0 for r in rows)
