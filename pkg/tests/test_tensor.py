import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distattn import tensor as T
from distattn.tensor import Tensor, finite_diff_check

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def weighted_sum(op, shape, seed=0):
    """f(x) = sum(op(x) * w) with fixed random w, so no gradient is trivially zero."""
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=shape)

    def f(x):
        return T.tsum(T.mul(op(x), w))

    return f


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_lin_embedding_sigma():
    x = np.array([1.0, -1.0, 0.3, -0.3])
    out = T.layer_norm(Tensor(x), eps=0.0).data
    # sigma of (1, -1, x, -x) is sqrt((1 + x^2) / 2); computed independently here
    sigma = math.sqrt((1 + 0.09) / 2)
    np.testing.assert_allclose(out, x / sigma, rtol=0, atol=1e-15)


@given(st.floats(-1e3, 1e3))
def test_layer_norm_constant_row_is_zero(c):
    out = T.layer_norm(Tensor(np.full(4, c)), eps=1e-5).data
    assert np.all(np.abs(out) < 1e-9)


def test_layer_norm_trig_embedding_is_sqrt2_times_input():
    x = np.array([math.cos(0.5), -math.cos(0.5), math.sin(0.5), -math.sin(0.5)])
    out = T.layer_norm(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(out, math.sqrt(2) * x, atol=1e-15)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 7), elements=st.floats(-100, 100)))
def test_layer_norm_row_moments(x):
    if np.any(x.std(axis=-1) < 1e-2):
        return
    out = T.layer_norm(Tensor(x), eps=1e-5).data
    assert np.all(np.abs(out.mean(-1)) < 1e-10)
    # eps shrinks the normalised variance to var / (var + eps)
    v = x.var(-1)
    np.testing.assert_allclose(out.var(-1), v / (v + 1e-5), rtol=1e-10)


def test_layer_norm_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.layer_norm(Tensor([1.0, np.nan, 0.0]))


def test_layer_norm_gain_bias_applied():
    x = Tensor([[0.0, 2.0]])
    out = T.layer_norm(x, Tensor([2.0, 3.0]), Tensor([1.0, -1.0]), eps=0.0).data
    np.testing.assert_allclose(out, [[-1.0, 2.0]])


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-16)


def test_softmax_ln2():
    np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_drops_constant_b():
    a, d = 0.7, np.array([0.0, 0.4, 1.3, 2.0])
    with_b = T.softmax(Tensor(5.0 - a * d**2)).data
    without = T.softmax(Tensor(-a * d**2)).data
    np.testing.assert_allclose(with_b, without, atol=1e-15)


@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), st.floats(-30, 30))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, p, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(3).normal(size=(5, 9))
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-13)


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    targets = np.array([0, 2])
    lse0 = math.log(math.exp(2) + 1 + math.exp(-1))
    expected = ((lse0 - 2.0) + math.log(3)) / 2
    assert T.cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, abs=1e-14)


def test_cross_entropy_weights_select_positions():
    logits = np.random.default_rng(0).normal(size=(4, 5))
    t = np.array([1, 2, 3, 4])
    w = np.array([0.0, 1.0, 0.0, 1.0])
    both = T.cross_entropy(Tensor(logits), t, w).item()
    sub = T.cross_entropy(Tensor(logits[[1, 3]]), t[[1, 3]]).item()
    assert both == pytest.approx(sub, abs=1e-14)


# -- activations --------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-5.0, 5.0])).data, [0.0, 5.0])


@pytest.mark.parametrize("kind", ["reglu", "swiglu"])
def test_glu_quadratic_identity_at_three(kind):
    fn = getattr(T, kind)
    total = fn(Tensor([3.0, 3.0])).data[0] + fn(Tensor([-3.0, -3.0])).data[0]
    assert abs(total - 9.0) < 1e-12


@pytest.mark.parametrize("kind", ["reglu", "swiglu"])
def test_gated_rejects_odd_last_axis(kind):
    with pytest.raises(ValueError):
        T.activation(Tensor(np.ones((2, 5))), kind)


def test_gated_halves_last_axis():
    assert T.swiglu(Tensor(np.ones((2, 3, 8)))).shape == (2, 3, 4)


def test_gelu_exact_form():
    from scipy.stats import norm

    xs = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(T.gelu(Tensor(xs)).data, xs * norm.cdf(xs), atol=1e-15)


def test_unknown_activation():
    with pytest.raises(ValueError):
        T.activation(Tensor([1.0]), "tanh")


# -- backward -------------------------------------------------------------------


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x * x))
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0, 12.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_backward_mean_layer_norm_is_zero():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 6)), requires_grad=True)
    T.backward(T.mean(T.layer_norm(x)))
    assert np.max(np.abs(x.grad)) < 1e-12


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * x)


def test_graph_records_ops_and_is_topological():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    w = Tensor([[0.5], [0.25]], requires_grad=True)
    loss = T.tsum(T.exp(T.matmul(x, w)))
    g = T.Graph(loss)
    assert g.ops == ["matmul", "exp", "sum"]
    assert {id(t) for t in g.leaves()} == {id(x), id(w)}
    position = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]


def test_every_reachable_leaf_gets_grad():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 3)), requires_grad=False)
    T.backward(T.mean(T.softmax(T.matmul(a + b, c))))
    assert a.grad is not None and a.grad.shape == a.shape
    assert b.grad is not None and b.grad.shape == b.shape
    assert c.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


# -- finite differences ---------------------------------------------------------


def test_fd_check_quadratic_is_exact():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert finite_diff_check(lambda t: T.tsum(t * t), x, h=1e-5) < 1e-8


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: T.tsum(t), Tensor([1.0], requires_grad=True), h=0.0)


def test_fd_check_detects_corrupted_gradient():
    x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
    err = finite_diff_check(lambda t: T.tsum(T.mul(T.corrupt_grad(t, 1), T.exp(t))), x)
    assert err > 1e-2


def _primitives():
    rng = np.random.default_rng(7)
    m = Tensor(rng.uniform(-2, 2, size=(4, 3)))
    return {
        "add": lambda x: T.add(x, m.data[:, :1]),
        "sub": lambda x: T.sub(2.0, x),
        "mul": lambda x: T.mul(x, x),
        "div": lambda x: T.div(x, T.add(T.mul(x, x), 1.0)),
        "matmul": lambda x: T.matmul(x, T.transpose(x, (1, 0))),
        "exp": T.exp,
        "log": lambda x: T.log(T.add(T.mul(x, x), 0.5)),
        "sqrt": lambda x: T.sqrt(T.add(T.mul(x, x), 0.5)),
        "abs": T.tabs,
        "power": lambda x: T.power(T.add(T.mul(x, x), 1.0), 1.5),
        "clamp": lambda x: T.clamp(x, -1.0, 1.0),
        "mean": lambda x: T.mean(x, axis=0, keepdims=True),
        "reshape": lambda x: T.reshape(x, (3, 4)),
        "getitem": lambda x: x[1:, ::2],
        "layer_norm": lambda x: T.layer_norm(x, eps=1e-5),
        "softmax": T.softmax,
        "log_softmax": T.log_softmax,
        "relu": T.relu,
        "gelu": T.gelu,
        "sigmoid": T.sigmoid,
        "reglu": lambda x: T.reglu(T.reshape(x, (3, 4))),
        "swiglu": lambda x: T.swiglu(T.reshape(x, (3, 4))),
    }


PRIMS = _primitives()


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_finite_differences(name):
    """100+ random trials per primitive on inputs drawn from [-2, 2]."""
    op = PRIMS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for trial in range(100):
        x = Tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True)
        if name in ("abs", "relu", "reglu", "clamp"):
            # keep away from kinks so central differences are meaningful
            x.data[np.abs(x.data) < 1e-3] += 1e-2
            x.data[np.abs(np.abs(x.data) - 1.0) < 1e-3] += 1e-2
        out_shape = op(Tensor(x.data)).shape
        worst = max(worst, finite_diff_check(weighted_sum(op, out_shape, trial), x, h=1e-5))
    assert worst < 1e-4


def test_embedding_gradient_scatter_adds():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = T.embedding(table, np.array([[1, 1, 3]]))
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(table.grad[:, 0], [0.0, 2.0, 0.0, 1.0])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    targets = rng.integers(0, 5, size=6)
    w = rng.uniform(0, 1, size=6)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    assert finite_diff_check(lambda t: T.cross_entropy(t, targets, w), x) < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-2, 2)))
def test_composite_gradient_property(x0):
    gain = Tensor(np.linspace(0.5, 1.5, 4))
    # softmax rows sum to 1, so an unweighted mean would have zero gradient
    mix = np.array([[1.0, -2.0], [0.5, 3.0]])

    def f(t):
        h = T.layer_norm(t, gain, eps=1e-5)
        return T.tsum(T.mul(T.softmax(T.matmul(h, T.transpose(h, (1, 0)))), mix))

    if np.any(x0.std(-1) < 1e-2):
        return
    probe = Tensor(x0.copy(), requires_grad=True)
    T.backward(f(probe))
    # entries many orders below the largest one are compared in absolute terms
    floor = max(1e-4 * np.abs(probe.grad).max(), 1e-12)
    assert finite_diff_check(f, Tensor(x0.copy(), requires_grad=True), floor=floor) < 1e-4


# -- rng ------------------------------------------------------------------------


@given(st.integers(0, 2**63 - 1))
def test_rng_is_deterministic(seed):
    a = T.make_rng(seed, 3).standard_normal(5)
    b = T.make_rng(seed, 3).standard_normal(5)
    assert a.tobytes() == b.tobytes()


def test_rng_streams_differ():
    assert not np.array_equal(T.make_rng(1, 0).random(4), T.make_rng(1, 1).random(4))


@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_add_broadcast_grad_shapes(a, b):
    ta = Tensor(a.reshape(3, 1), requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    T.backward(T.tsum(ta + tb))
    np.testing.assert_array_equal(ta.grad, np.full((3, 1), 3.0))
    np.testing.assert_array_equal(tb.grad, np.full(3, 3.0))
