import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gad import tensor as T
from gad.gradcheck import grad_check
from gad.tensor import BatchNormState, Tensor
from oracles import central_diff, matmul_loops, softmax_ref

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def grad_of(fn, *xs):
    with T.Tape() as tape:
        loss = fn(*xs)
        tape.backward(loss)
    return [x.grad for x in xs]


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, eye).data, np.eye(2))


def test_matmul_hand_checked():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_rule():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    r = rng.normal(size=(3, 2))
    ga, gb = grad_of(lambda a, b: T.sum_all(T.mul(T.matmul(a, b), Tensor(r))), a, b)
    assert np.allclose(ga, r @ b.data.T)
    assert np.allclose(gb, a.data.T @ r)


# --- softmax -----------------------------------------------------------------


def test_softmax_zero_row_uniform():
    assert np.allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25)


def test_softmax_log_row():
    out = T.softmax_rows(Tensor(np.log([[1.0, 2.0, 3.0]]))).data
    assert np.allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


def test_softmax_matches_direct_formula():
    m = np.random.default_rng(2).normal(size=(6, 6))
    assert np.allclose(T.softmax_rows(Tensor(m)).data, softmax_ref(m), atol=1e-12, rtol=0)


def test_softmax_large_logits_stay_finite():
    out = T.softmax_rows(Tensor([[1000.0, 1001.0, -1000.0]])).data
    assert np.all(np.isfinite(out))


@given(arrays(np.float64, (4, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(m, c):
    a = T.softmax_rows(Tensor(m)).data
    b = T.softmax_rows(Tensor(m + c)).data
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(a >= 0)
    assert np.allclose(a, b, atol=1e-9)


# --- elementwise ---------------------------------------------------------------


def test_hadamard_with_zeros():
    f = Tensor(np.random.default_rng(3).normal(size=(3, 3)))
    assert np.array_equal(T.mul(f, Tensor(np.zeros((3, 3)))).data, np.zeros((3, 3)))


def test_tanh_and_leaky_values():
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    assert T.leaky_relu(Tensor([-1.0]), 0.2).data[0] == pytest.approx(-0.2)


def test_hadamard_gradient_matches_central_differences():
    rng = np.random.default_rng(4)
    a0, b0, r = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0, requires_grad=True)
    ga, _ = grad_of(lambda a, b: T.sum_all(T.mul(T.mul(a, b), Tensor(r))), a, b)
    num = central_diff(lambda x: float(((x * b0) * r).sum()), a0.copy())
    assert np.allclose(ga, num, atol=1e-6)


def test_elementwise_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.add(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_tanh_derivative_is_one_minus_square():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    (g,) = grad_of(lambda x: T.sum_all(T.tanh(x)), x)
    assert np.allclose(g, 1 - np.tanh(x.data) ** 2)


def test_injected_tanh_fault_changes_gradient():
    x = Tensor(np.array([0.5]), requires_grad=True)
    with T.inject_fault("tanh"):
        (g,) = grad_of(lambda x: T.sum_all(T.tanh(x)), x)
    assert not np.isclose(g[0], 1 - np.tanh(0.5) ** 2)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_forward_ops_finite_on_finite_input(x):
    t = Tensor(x)
    for out in (T.tanh(t), T.sigmoid(t), T.leaky_relu(t), T.softmax_rows(t), T.square(t), T.abs_(t)):
        assert np.all(np.isfinite(out.data))
        assert out.data.size == math.prod(out.shape)


# --- linear -----------------------------------------------------------------


def test_linear_identity():
    x = np.random.default_rng(5).normal(size=(4, 3))
    out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_linear_hand_checked():
    out = T.linear(Tensor([[1.0, 1.0]]), Tensor([[1.0], [2.0]]), Tensor([3.0]))
    assert out.data.tolist() == [[6.0]]


def test_linear_weight_gradient_matches_central_differences():
    rng = np.random.default_rng(6)
    x, w0, b, r = rng.normal(size=(3, 2)), rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=(3, 2))
    w = Tensor(w0.copy(), requires_grad=True)
    (gw,) = grad_of(lambda w: T.sum_all(T.mul(T.linear(Tensor(x), w, Tensor(b)), Tensor(r))), w)
    num = central_diff(lambda ww: float(((x @ ww + b) * r).sum()), w0.copy())
    assert np.allclose(gw, num, atol=1e-6)


# --- batch norm ----------------------------------------------------------------


def _bn(x, training=True, state=None):
    c = x.shape[-1]
    state = state or BatchNormState.create(c)
    out = T.batch_norm(Tensor(x), state, Tensor(np.ones(c)), Tensor(np.zeros(c)), training)
    return out.data, state


def test_batch_norm_constant_column_is_zero():
    out, _ = _bn(np.full((5, 1), 3.0))
    assert np.array_equal(out, np.zeros((5, 1)))


def test_batch_norm_already_normalized_column():
    out, _ = _bn(np.array([[-1.0], [1.0]]))
    assert np.allclose(out[:, 0], [-1.0, 1.0], atol=1e-5)
    assert np.allclose(out[:, 0], np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), atol=1e-15)


def test_batch_norm_running_stats_match_hand_recurrence():
    x = np.array([[1.0], [2.0], [6.0]])
    _, state = _bn(x)
    mean, unbiased = 3.0, ((1 - 3) ** 2 + (2 - 3) ** 2 + (6 - 3) ** 2) / 2
    assert state.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * mean)
    assert state.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * unbiased)


def test_batch_norm_degenerate_batch():
    with pytest.raises(T.DegenerateBatchError):
        _bn(np.ones((1, 3)))


def test_batch_norm_inference_uses_running_stats():
    state = BatchNormState.create(1)
    state.running_mean[:] = 2.0
    state.running_var[:] = 4.0
    out, _ = _bn(np.array([[4.0]]), training=False, state=state)
    assert out[0, 0] == pytest.approx(2.0 / math.sqrt(4.0 + 1e-5))


@given(arrays(np.float64, (7, 3), elements=st.floats(-5, 5)))
def test_batch_norm_columns_standardized(x):
    x = x + np.arange(7)[:, None] * np.array([0.37, 0.91, 1.3])  # keep columns non-degenerate
    out, state = _bn(x)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    var = x.var(axis=0)
    assert np.allclose(out.var(axis=0), var / (var + 1e-5), atol=1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6 + 1e-5 / var)
    assert np.all(state.running_var >= 0)


def test_mlp_stage_matches_unfused_chain():
    rng = np.random.default_rng(7)
    x, w = Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(4, 3)))
    g, b = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.normal(size=3))
    fused = T.mlp_stage(x, w, g, b, BatchNormState.create(3), 0.2, True).data
    chain = T.leaky_relu(T.batch_norm(T.linear(x, w), BatchNormState.create(3), g, b, True), 0.2).data
    assert np.allclose(fused, chain, atol=1e-12)


# --- max / concat / dropout ------------------------------------------------------


def test_max_over_axis_hand_checked():
    vals, arg = T.max_over_axis(Tensor([[1.0, 5.0], [7.0, 2.0]]), axis=1)
    assert vals.data.tolist() == [5.0, 7.0]
    assert arg.tolist() == [1, 0]


def test_max_over_single_neighbor():
    x = np.random.default_rng(8).normal(size=(4, 1, 3))
    vals, _ = T.max_over_axis(Tensor(x), axis=1)
    assert np.array_equal(vals.data, x[:, 0])


def test_max_ties_lowest_index_and_gradient_mask():
    x = Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
    _, arg = T.max_over_axis(x, axis=1)
    assert arg.tolist() == [0]
    (g,) = grad_of(lambda x: T.sum_all(T.max_over_axis(x, axis=1)[0]), x)
    assert g.tolist() == [[1.0, 0.0, 0.0]]


def test_max_empty_axis_errors():
    with pytest.raises(ValueError):
        T.max_over_axis(Tensor(np.zeros((3, 0))), axis=1)


@given(arrays(np.float64, (3, 4, 5), elements=finite, unique=True))
def test_max_gradient_mask_sums_to_one_per_slice(x):
    t = Tensor(x, requires_grad=True)
    (g,) = grad_of(lambda t: T.sum_all(T.max_over_axis(t, axis=1)[0]), t)
    assert set(np.unique(g)) <= {0.0, 1.0}
    assert np.array_equal(g.sum(axis=1), np.ones((3, 5)))


def test_max_gradient_matches_central_differences():
    x0 = np.random.default_rng(9).permutation(20).reshape(4, 5) / 7.0
    x = Tensor(x0.copy(), requires_grad=True)
    (g,) = grad_of(lambda x: T.sum_all(T.max_over_axis(x, axis=1)[0]), x)
    assert np.allclose(g, central_diff(lambda a: float(a.max(axis=1).sum()), x0.copy()), atol=1e-8)


def test_concat_single_and_pair():
    a = Tensor(np.ones((3, 1)))
    assert np.array_equal(T.concat_channels([a]).data, a.data)
    out = T.concat_channels([a, Tensor(np.full((3, 1), 2.0))]).data
    assert out.tolist() == [[1.0, 2.0]] * 3


def test_concat_leading_mismatch():
    with pytest.raises(T.DimensionError):
        T.concat_channels([Tensor(np.ones((3, 1))), Tensor(np.ones((4, 1)))])


def test_concat_gradient_slices():
    rng = np.random.default_rng(10)
    a0, b0, r = rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=(3, 5))
    a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
    ga, gb = grad_of(lambda a, b: T.sum_all(T.mul(T.concat_channels([a, b]), Tensor(r))), a, b)
    assert np.allclose(ga, central_diff(lambda z: float((np.hstack([z, b0]) * r).sum()), a0.copy()), atol=1e-8)
    assert np.allclose(gb, central_diff(lambda z: float((np.hstack([a0, z]) * r).sum()), b0.copy()), atol=1e-8)


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(11).normal(size=(4, 4)))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.9, False, rng) is x


def test_dropout_rate_validation():
    with pytest.raises(T.ConfigError):
        T.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_keep_fraction_and_scale():
    out = T.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(12)).data
    kept = out != 0
    assert abs(kept.mean() - 0.5) < 0.01
    assert np.all(out[kept] == 2.0)


# --- tape -----------------------------------------------------------------------


def test_backward_sum_and_square():
    x = Tensor(np.random.default_rng(13).normal(size=(3, 2)), requires_grad=True)
    (g,) = grad_of(T.sum_all, x)
    assert np.array_equal(g, np.ones((3, 2)))
    (g,) = grad_of(lambda x: T.sum_all(T.mul(x, x)), x)
    assert np.allclose(g, 2 * x.data)


def test_fan_out_accumulates_exactly():
    x = Tensor(np.random.default_rng(14).normal(size=(5,)), requires_grad=True)
    (g,) = grad_of(lambda x: T.add(T.sum_all(x), T.sum_all(x)), x)
    assert np.array_equal(g, np.full(5, 2.0))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(T.TapeError):
            tape.backward(y)


def test_tape_nodes_are_topological_and_untouched_leaves_get_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        b = T.scale(a, 3.0)
        c = T.sum_all(T.mul(b, b))
        seen = {id(a)}
        for node in tape.nodes:
            assert all(id(t) in seen or not t.requires_grad for t in node.inputs)
            seen.add(id(node.output))
        _ = T.add(unused, unused)
        tape.backward(c)
    assert a.grad.shape == a.shape
    assert np.array_equal(unused.grad, np.zeros(3))


def test_gather_rows_circular_shift_and_in_degree():
    x = Tensor(np.arange(5.0).reshape(5, 1), requires_grad=True)
    idx = ((np.arange(5) + 1) % 5).reshape(5, 1)
    out = T.gather_rows(x, idx)
    assert out.data[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0, 0.0]
    idx2 = np.array([[1, 2], [2, 2], [0, 2], [2, 1], [1, 0]])
    (g,) = grad_of(lambda x: T.sum_all(T.gather_rows(x, idx2)), x)
    assert g[:, 0].tolist() == np.bincount(idx2.ravel(), minlength=5).tolist()


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.ones((3, 2))), np.array([[0], [5], [1]]))


# --- grad_check itself ------------------------------------------------------------


def test_grad_check_identity_is_exact():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    rep = grad_check(lambda: T.sum_all(x), {"x": x}, eps=2.0**-10)
    assert rep.max_rel_error == 0.0


def test_grad_check_matmul_fixed_operand():
    rng = np.random.default_rng(15)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)))
    rep = grad_check(lambda: T.sum_all(T.matmul(a, b)), {"a": a})
    assert rep.max_rel_error < 1e-8


def test_grad_check_flags_wrong_derivative():
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    with T.inject_fault("tanh"):
        rep = grad_check(lambda: T.sum_all(T.tanh(x)), {"x": x})
    assert not rep.passed
    assert rep.worst.startswith("x[")
