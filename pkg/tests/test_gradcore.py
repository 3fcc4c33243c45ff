import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from recattack import gradcore as gc

H = 1e-5
TOL = 1e-4


def check_grad(build, point):
    """Reverse-mode vs central differences for a scalar graph builder."""
    _, analytic = gc.grad(build, point)
    numeric = gc.finite_difference_gradient(lambda p: build(gc.constant(p)).value, point, H)
    err = gc.relative_error(analytic, numeric)
    assert err.max() < TOL, err.max()


def test_matmul_identity():
    out = gc.apply_primitive("matmul", gc.constant([[1, 2], [3, 4]]), gc.constant(np.eye(2)))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_relu_sign_boundaries():
    np.testing.assert_array_equal(gc.relu(gc.constant([-1.0, 0.0, 2.0])).value, [0, 0, 2])


def test_sum_counts():
    assert gc.apply_primitive("sum", gc.constant(np.ones(3))).value == 3.0


@pytest.mark.parametrize("op,shapes", [
    ("add", [(2, 3), (3, 2)]),
    ("mul", [(2,), (3,)]),
    ("matmul", [(2, 3), (2, 3)]),
    ("l2_squared_distance", [(2,), (3,)]),
])
def test_shape_mismatch_names_primitive(op, shapes):
    nodes = [gc.constant(np.zeros(s)) for s in shapes]
    with pytest.raises(gc.ShapeError, match=op):
        gc.apply_primitive(op, *nodes)


def test_unknown_primitive():
    with pytest.raises(ValueError):
        gc.apply_primitive("conv", gc.constant(1.0))


def test_log_softmax_symmetric():
    out = gc.log_softmax(gc.constant([0.0, 0.0])).value
    np.testing.assert_allclose(out, [-math.log(2)] * 2, atol=1e-12)


def test_log_softmax_large_shift():
    out = gc.log_softmax(gc.constant([1000.0, 0.0])).value
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == pytest.approx(-1000.0, abs=1e-9)


def test_log_softmax_matches_naive_two_pass():
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=3.0, size=(5, 17))
    naive = np.empty_like(logits)
    for r, row in enumerate(logits):
        total = sum(math.exp(v) for v in row)
        naive[r] = [v - math.log(total) for v in row]
    np.testing.assert_allclose(gc.log_softmax(gc.constant(logits)).value, naive, atol=1e-9)


def test_log_softmax_rejects_short_axis():
    with pytest.raises(gc.ShapeError):
        gc.log_softmax(gc.constant([1.0]))
    with pytest.raises(gc.ShapeError):
        gc.log_softmax(gc.constant(np.zeros((3, 0))))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_log_softmax_normalized_and_shift_invariant(logits, shift):
    out = gc.log_softmax(gc.constant(logits)).value
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-9)
    shifted = gc.log_softmax(gc.constant(logits + shift)).value
    np.testing.assert_allclose(shifted, out, atol=1e-9)


def test_l2_squared_distance_values():
    v = gc.constant([0.3, -2.0, 5.0])
    assert gc.l2_squared_distance(v, v).value == 0.0
    a, b = [1.0, 2.0], [0.0, 0.0]
    loop = 0.0
    for ai, bi in zip(a, b):
        loop += (ai - bi) ** 2
    assert gc.l2_squared_distance(gc.constant(a), gc.constant(b)).value == loop == 5.0


def test_l2_squared_distance_gradient_closed_form():
    rng = np.random.default_rng(0)
    a, c = rng.normal(size=6), rng.normal(size=6)
    _, g = gc.grad(lambda x: gc.l2_squared_distance(x, gc.constant(c)), a)
    np.testing.assert_allclose(g, 2 * (a - c), atol=1e-12)
    numeric = gc.finite_difference_gradient(lambda p: np.sum((p - c) ** 2), a, H)
    assert gc.relative_error(g, numeric).max() < TOL


def test_backward_of_sum_is_ones():
    x = gc.leaf(np.arange(12.0).reshape(3, 4))
    grads = gc.backward(gc.sum(x))
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))


def test_backward_constant_root_gives_zero():
    x = gc.leaf(np.ones(3))
    y = gc.leaf(np.ones(3))
    root = gc.sum(gc.tanh(y))
    (gx,) = gc.backward(root, wrt=[x])
    np.testing.assert_array_equal(gx, np.zeros(3))


def test_backward_rejects_nonscalar():
    with pytest.raises(gc.ShapeError):
        gc.backward(gc.tanh(gc.leaf(np.ones(2))))


def test_backward_zeroes_between_calls():
    x = gc.leaf([1.0, 2.0])
    root = gc.sum(gc.mul(x, x))
    first = gc.backward(root)[x].copy()
    second = gc.backward(root)[x]
    np.testing.assert_array_equal(first, second)


def test_fanout_accumulates():
    x = gc.leaf([1.5, -0.5])
    root = gc.sum(gc.add(gc.mul(x, x), x))
    np.testing.assert_allclose(gc.backward(root)[x], 2 * np.array([1.5, -0.5]) + 1)


def test_backward_linearity():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    point = rng.normal(size=(2, 4))

    def first(x):
        return gc.sum(gc.tanh(gc.matmul(x, gc.constant(w))))

    def second(x):
        return gc.l2_squared_distance(x, gc.constant(np.ones((2, 4))))

    _, g1 = gc.grad(first, point)
    _, g2 = gc.grad(second, point)
    _, g12 = gc.grad(lambda x: gc.add(first(x), second(x)), point)
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)


def test_finite_difference_quadratic():
    g = gc.finite_difference_gradient(lambda p: float(p[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_linear_and_constant():
    c = np.array([1.5, -2.0, 0.25])
    g = gc.finite_difference_gradient(lambda p: float(c @ p), np.zeros(3), 1e-5)
    np.testing.assert_allclose(g, c, rtol=1e-9)
    np.testing.assert_array_equal(gc.finite_difference_gradient(lambda p: 4.0, np.ones(3), 1e-5),
                                  np.zeros(3))


def test_finite_difference_reports_bad_coordinate():
    def objective(p):
        return float("nan") if p[2] > 0.5 else float(p.sum())
    with pytest.raises(FloatingPointError, match="coordinate 2"):
        gc.finite_difference_gradient(objective, np.array([0.0, 0.0, 0.5]), 1e-3)
    with pytest.raises(ValueError):
        gc.finite_difference_gradient(objective, np.zeros(3), 0.0)


# every primitive at 10 seeded points, away from relu kinks
def _primitive_cases(rng):
    w = rng.normal(size=(4, 3))
    bias = rng.normal(size=3)
    table_idx = np.array([0, 2, 2, 1])
    onehot = rng.normal(size=(2, 6))
    return {
        "add": (lambda x: gc.sum(gc.tanh(gc.add(gc.matmul(x, gc.constant(w)), gc.constant(bias)))), (2, 4)),
        "sub": (lambda x: gc.sum(gc.mul(gc.sub(x, gc.constant(np.ones((2, 4)))), x)), (2, 4)),
        "mul": (lambda x: gc.sum(gc.mul(x, gc.tanh(x))), (2, 4)),
        "matmul": (lambda x: gc.sum(gc.tanh(gc.matmul(x, gc.constant(w)))), (2, 4)),
        "relu": (lambda x: gc.sum(gc.mul(gc.relu(x), x)), (2, 4)),
        "tanh": (lambda x: gc.sum(gc.tanh(x)), (2, 4)),
        "sum": (lambda x: gc.sum(gc.tanh(gc.sum(x, axis=0))), (3, 4)),
        "mean": (lambda x: gc.mean(gc.mul(gc.mean(x, axis=1), gc.mean(x, axis=1))), (3, 4)),
        "gather_rows": (lambda x: gc.sum(gc.tanh(gc.gather_rows(x, table_idx))), (3, 2)),
        "concat": (lambda x: gc.sum(gc.tanh(gc.concat([x, gc.scale(x, 2.0)], axis=1))), (2, 3)),
        "scale": (lambda x: gc.sum(gc.tanh(gc.scale(x, -1.7))), (5,)),
        "reshape": (lambda x: gc.sum(gc.tanh(gc.matmul(gc.reshape(x, (2, 4)), gc.constant(w)))), (8,)),
        "transpose": (lambda x: gc.sum(gc.tanh(gc.matmul(gc.reshape(gc.transpose(x, (2, 0, 1)), (2, 4)),
                                                         gc.constant(w)))), (2, 2, 2)),
        "log_softmax": (lambda x: gc.sum(gc.mul(gc.log_softmax(x), gc.constant(onehot))), (2, 6)),
        "l2_squared_distance": (lambda x: gc.l2_squared_distance(gc.tanh(x), gc.constant(np.ones(5))), (5,)),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        build, shape = _primitive_cases(rng)[name]
        point = rng.normal(size=shape)
        if name == "relu":
            point = np.where(np.abs(point) < 1e-2, 0.5, point)
        check_grad(build, point)


def test_node_operators():
    x = gc.leaf([1.0, 2.0])
    y = (x * 3.0 + 1.0 - x) * x
    np.testing.assert_allclose(y.value, [3.0, 10.0])
    np.testing.assert_allclose(gc.backward(gc.sum(-y))[x], -(4 * np.array([1.0, 2.0]) + 1))
