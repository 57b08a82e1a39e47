import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtnet.autodiff import OPS, NonFiniteError, ShapeError, Tape, finite_difference, grad
from mtnet.verify import OP_CASES, gradient_error, op_gradient_error, second_order_residual

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_every_op_has_a_gradient_check():
    checked = {name.replace("_right", "") for name in OP_CASES}
    assert set(OPS) <= checked


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_difference(op, seed):
    rng = np.random.default_rng(seed)
    assert op_gradient_error(op, rng, 3, 2) <= 1e-4


def test_matmul_gradient_by_hand():
    tape = Tape()
    a = tape.variable([[1.0, 2.0], [3.0, 4.0]])
    b = tape.constant([[5.0], [6.0]])
    ga, = grad(tape, tape.sum_all(tape.matmul(a, b)), [a])
    np.testing.assert_array_equal(ga.value, [[5.0, 6.0], [5.0, 6.0]])


def test_mse_is_mean_over_elements():
    tape = Tape()
    loss = tape.mse_loss(tape.constant([[1.0, 3.0]]), tape.constant([[0.0, 0.0]]))
    assert loss.value[0, 0] == 5.0


def test_relu_derivative_at_zero_is_zero():
    tape = Tape()
    x = tape.variable([[-1.0, 0.0, 2.0]])
    g, = grad(tape, tape.sum_all(tape.relu(x)), [x])
    np.testing.assert_array_equal(g.value, [[0.0, 0.0, 1.0]])


def test_sigmoid_is_stable_for_large_inputs():
    tape = Tape()
    out = tape.sigmoid(tape.constant([[-800.0, 0.0, 800.0]]))
    np.testing.assert_allclose(out.value, [[0.0, 0.5, 1.0]])


def test_unreachable_wrt_gets_zeros():
    tape = Tape()
    x, y = tape.variable([[1.0, 2.0]]), tape.variable([[3.0]])
    gx, gy = grad(tape, tape.sum_all(x), [x, y])
    np.testing.assert_array_equal(gy.value, [[0.0]])
    np.testing.assert_array_equal(gx.value, [[1.0, 1.0]])


def test_grad_rejects_nonscalar_and_foreign_nodes():
    tape, other = Tape(), Tape()
    x = tape.variable([[1.0, 2.0]])
    with pytest.raises(ShapeError):
        grad(tape, x, [x])
    z = other.variable(1.0)
    with pytest.raises(ValueError):
        grad(tape, tape.sum_all(x), [z])


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        tape.add(tape.constant(np.ones((2, 1))), tape.constant(np.ones((1, 2))))


def test_nonfinite_names_the_op():
    tape = Tape()
    with pytest.raises(NonFiniteError) as info:
        tape.log(tape.constant([[0.0]]))
    assert info.value.op == "log"


def test_gradient_without_create_graph_leaves_no_pending_graph():
    tape = Tape()
    x = tape.variable([[2.0]])
    y = tape.hadamard(x, x)
    g, = grad(tape, tape.sum_all(y), [x])
    assert not g.requires_grad
    assert g.value[0, 0] == 4.0


def test_second_order_cubic():
    # f = x^3: f' = 3x^2, f'' = 6x
    tape = Tape()
    x = tape.variable([[1.5]])
    f = tape.sum_all(tape.hadamard(x, tape.hadamard(x, x)))
    g, = grad(tape, f, [x], create_graph=True)
    h, = grad(tape, tape.sum_all(g), [x])
    assert g.value[0, 0] == pytest.approx(6.75)
    assert h.value[0, 0] == pytest.approx(9.0)


@pytest.mark.parametrize("n", [1, 3, 8])
def test_second_order_through_inner_step_on_a_quadratic(n):
    assert second_order_residual(np.random.default_rng(n), n) <= 1e-8


def test_gumbel_with_fixed_noise_is_deterministic():
    tape = Tape(seed=0)
    z = tape.constant([[0.3], [-1.0]])
    noise = (np.array([0.1, 0.2]), np.array([-0.4, 0.5]))
    a = tape.gumbel_bernoulli(z, 0.5, noise).value
    b = tape.gumbel_bernoulli(z, 0.5, noise).value
    np.testing.assert_array_equal(a, b)
    expected = 1.0 / (1.0 + np.exp(-(np.array([[0.3], [-1.0]]) + np.array([[0.5], [-0.3]])) / 0.5))
    np.testing.assert_allclose(a, expected)


def test_gumbel_relaxation_mean_tracks_sigmoid():
    # low temperature: relaxed draws are near-binary with P(1) = sigmoid(zeta)
    tape = Tape(seed=3)
    zeta = 0.7
    draws = tape.gumbel_bernoulli(tape.constant(np.full((20000, 1), zeta)), 0.05).value
    assert abs(np.mean(draws > 0.5) - 1 / (1 + np.exp(-zeta))) < 0.015


def test_append_and_take_rows_round_trip():
    tape = Tape()
    a = tape.constant(np.arange(6.0).reshape(2, 3))
    b = tape.append_row(a, 1.0)
    np.testing.assert_array_equal(b.value[-1], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(tape.take_rows(b, 2).value, a.value)


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference(lambda x: float(np.sum(x)), np.zeros(2), h=0.0)


def test_gradient_error_floor():
    assert gradient_error([1e-9], [2e-9]) < 1e-5
    assert gradient_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2, 4), elements=finite))
def test_matmul_vjp_is_adjoint(a, b):
    # <g, d(AB)> == <grad_A, dA> + <grad_B, dB> for the linear map
    tape = Tape()
    an, bn = tape.variable(a), tape.variable(b)
    w = np.arange(12.0).reshape(3, 4) / 7.0
    f = tape.sum_all(tape.hadamard(tape.matmul(an, bn), tape.constant(w)))
    ga, gb = grad(tape, f, [an, bn])
    np.testing.assert_allclose(ga.value, w @ b.T, atol=1e-12)
    np.testing.assert_allclose(gb.value, a.T @ w, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_gradient_accumulates_over_fanout(x):
    # f = sum(x) + sum(x * x) uses x three times
    tape = Tape()
    xn = tape.variable(x)
    f = tape.add(tape.sum_all(xn), tape.sum_all(tape.hadamard(xn, xn)))
    g, = grad(tape, f, [xn])
    np.testing.assert_allclose(g.value, 1.0 + 2.0 * x, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_tape_ids_are_topological(r, c, seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    x = tape.variable(rng.standard_normal((r, c)))
    y = tape.sigmoid(tape.matmul(tape.transpose(x), x))
    grad(tape, tape.sum_all(y), [x], create_graph=True)
    for node in tape.nodes:
        assert all(p.id < node.id for p in node.parents)
