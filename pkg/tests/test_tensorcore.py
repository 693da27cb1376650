"""Tape engine: op semantics, gradient checks against finite differences."""

import numpy as np
import pytest

from pedcast import tensorcore as tc
from gradcheck import assert_grads_match


def leaf(shape, rng, scale=1.0):
    return tc.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_matmul_identity_and_value():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 3))
    out = tc.matmul(tc.Tensor(a), tc.Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, a)
    b = rng.standard_normal((3, 5))
    out2 = tc.matmul(tc.Tensor(a), tc.Tensor(b))
    np.testing.assert_allclose(out2.data, a @ b, rtol=0, atol=0)


def test_matmul_shape_error():
    with pytest.raises(tc.ShapeError):
        tc.matmul(tc.Tensor(np.zeros((2, 3))), tc.Tensor(np.zeros((4, 2))))


def test_backward_of_square_sum():
    # loss = sum(x * x) -> grad 2x
    x = tc.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with tc.Tape() as tape:
        loss = tc.tensor_sum(tc.mul(x, x))
    tc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], atol=1e-15)


def test_backward_requires_scalar():
    x = tc.Tensor([1.0, 2.0], requires_grad=True)
    with tc.Tape() as tape:
        y = tc.mul(x, x)
    with pytest.raises(tc.ShapeError):
        tc.backward(y, tape)


def test_backward_accumulates_until_cleared():
    x = tc.Tensor([3.0], requires_grad=True)
    with tc.Tape() as tape:
        loss = tc.tensor_sum(tc.mul(x, x))
    tc.backward(loss, tape)
    tc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [12.0])  # 2 * (2x)
    x.zero_grad()
    tc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [6.0])


def test_fanout_gradient_sums_over_consumers():
    x = tc.Tensor([2.0], requires_grad=True)
    with tc.Tape() as tape:
        y = tc.mul(x, x)          # x^2
        loss = tc.tensor_sum(tc.add(y, tc.mul(x, 3.0)))  # x^2 + 3x
    tc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [7.0])


def test_prelu_values_and_slope_grad():
    x = tc.Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    a = tc.Tensor(0.25, requires_grad=True)
    with tc.Tape() as tape:
        out = tc.prelu(x, a)
        loss = tc.tensor_sum(out)
    np.testing.assert_allclose(out.data, [-0.5, 0.0, 3.0])
    tc.backward(loss, tape)
    # d sum / d slope = sum of negative inputs = -2
    np.testing.assert_allclose(a.grad, -2.0)
    np.testing.assert_allclose(x.grad, [0.25, 1.0, 1.0])


def test_conv_time_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = tc.Tensor(rng.standard_normal((2, 6, 3)))
    w = np.zeros((2, 2, 3))
    w[0, 0, 1] = 1.0
    w[1, 1, 1] = 1.0
    out = tc.conv_time(x, tc.Tensor(w), padding=1)
    np.testing.assert_allclose(out.data, x.data, atol=0)


def test_conv_time_rejects_even_kernel():
    x = tc.Tensor(np.zeros((1, 4, 2)))
    with pytest.raises(tc.ConfigError):
        tc.conv_time(x, tc.Tensor(np.zeros((1, 1, 2))), padding=0)


def test_conv_time_columns_do_not_mix():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8, 4))
    w = tc.Tensor(rng.standard_normal((5, 3, 3)))
    b = tc.Tensor(rng.standard_normal(5))
    full = tc.conv_time(tc.Tensor(x), w, b, padding=1).data
    for n in range(4):
        col = tc.conv_time(tc.Tensor(x[:, :, n:n + 1]), w, b, padding=1).data
        np.testing.assert_array_equal(full[:, :, n:n + 1], col)


def test_graph_aggregate_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5, 2))
    adj = np.broadcast_to(np.eye(5), (4, 5, 5)).copy()
    out = tc.graph_aggregate(tc.Tensor(adj), tc.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_nonfinite_forward_raises():
    x = tc.Tensor([1.0, 0.0])
    with pytest.raises(tc.NumericError):
        tc.div(tc.Tensor([1.0, 1.0]), x)
    with pytest.raises(tc.NumericError):
        tc.log(tc.Tensor([-1.0]))


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    ta, tb = tc.Tensor(a.copy()), tc.Tensor(b.copy())
    with tc.Tape() as tape:
        loss = tc.tensor_sum(tc.matmul(tc.tanh(ta), tc.exp(tc.mul(tb, 0.1))))
    np.testing.assert_array_equal(ta.data, a)
    np.testing.assert_array_equal(tb.data, b)


def test_forward_deterministic_in_process():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 7, 3))
    w = rng.standard_normal((4, 2, 3))
    r1 = tc.conv_time(tc.Tensor(x), tc.Tensor(w), padding=1).data
    r2 = tc.conv_time(tc.Tensor(x), tc.Tensor(w), padding=1).data
    assert np.array_equal(r1, r2)


def test_no_recording_without_tape():
    x = tc.Tensor([1.0], requires_grad=True)
    out = tc.mul(x, x)
    assert out.requires_grad  # flag propagates, but nothing to replay
    with tc.Tape() as tape:
        pass
    assert len(tape) == 0


# ---------------------------------------------------------------------------
# finite-difference sweeps: every differentiable op, 50+ random trials total


def _op_cases(rng):
    """Yield (name, build, leaves) gradient-check cases."""
    t, n = 5, 4
    yield "add", lambda a, b: tc.tensor_sum(tc.add(a, b)), \
        [leaf((t, n), rng), leaf((t, n), rng)]
    yield "add_broadcast", lambda a, b: tc.tensor_sum(tc.add(a, b)), \
        [leaf((t, n), rng), leaf((n,), rng)]
    yield "sub", lambda a, b: tc.tensor_sum(tc.mul(tc.sub(a, b), tc.sub(a, b))), \
        [leaf((t, n), rng), leaf((t, n), rng)]
    yield "mul", lambda a, b: tc.tensor_sum(tc.mul(a, b)), \
        [leaf((t, n), rng), leaf((t, n), rng)]
    yield "div", lambda a, b: tc.tensor_sum(tc.div(a, b)), \
        [leaf((t, n), rng), tc.Tensor(rng.uniform(0.5, 2.0, (t, n)), requires_grad=True)]
    yield "exp", lambda a: tc.tensor_sum(tc.exp(a)), [leaf((t, n), rng, 0.5)]
    yield "log", lambda a: tc.tensor_sum(tc.log(a)), \
        [tc.Tensor(rng.uniform(0.5, 3.0, (t, n)), requires_grad=True)]
    yield "tanh", lambda a: tc.tensor_sum(tc.tanh(a)), [leaf((t, n), rng)]
    yield "clip", lambda a: tc.tensor_sum(tc.mul(tc.clip(a, -0.5, 0.5), a)), \
        [leaf((t, n), rng)]
    yield "prelu", lambda a, s: tc.tensor_sum(tc.prelu(a, s)), \
        [leaf((t, n), rng), tc.Tensor(0.25, requires_grad=True)]
    yield "matmul", lambda a, b: tc.tensor_sum(tc.matmul(a, b)), \
        [leaf((3, 4), rng), leaf((4, 2), rng)]
    yield "sum_axis", lambda a: tc.tensor_sum(tc.mul(tc.tensor_sum(a, axis=0),
                                                     tc.tensor_sum(a, axis=0))), \
        [leaf((t, n), rng)]
    yield "mean", lambda a: tc.tensor_mean(tc.mul(a, a)), [leaf((t, n), rng)]
    yield "reshape", lambda a: tc.tensor_sum(tc.mul(tc.reshape(a, (n, t)), 2.0)), \
        [leaf((t, n), rng)]
    yield "transpose", lambda a: tc.tensor_sum(tc.mul(tc.transpose(a, (1, 0)),
                                                      tc.transpose(a, (1, 0)))), \
        [leaf((t, n), rng)]
    yield "slice_last", lambda a: tc.tensor_sum(tc.mul(tc.slice_last(a, 1, 3),
                                                       tc.slice_last(a, 1, 3))), \
        [leaf((t, n), rng)]
    yield "graph_aggregate", \
        lambda adj, x: tc.tensor_sum(tc.mul(tc.graph_aggregate(adj, x),
                                            tc.graph_aggregate(adj, x))), \
        [leaf((3, 4, 4), rng), leaf((3, 4, 2), rng)]
    yield "pointwise_mix", \
        lambda x, w, b: tc.tensor_sum(tc.tanh(tc.pointwise_mix(x, w, b))), \
        [leaf((3, t, n), rng), leaf((2, 3), rng), leaf((2,), rng)]
    yield "conv_time", \
        lambda x, w, b: tc.tensor_sum(tc.tanh(tc.conv_time(x, w, b, padding=1))), \
        [leaf((2, t, n), rng), leaf((3, 2, 3), rng), leaf((3,), rng)]
    yield "conv_time_nopad", \
        lambda x, w: tc.tensor_sum(tc.conv_time(x, w, padding=0)), \
        [leaf((2, t, n), rng), leaf((3, 2, 3), rng)]


def test_gradients_match_finite_differences():
    trials = 0
    for trial in range(3):
        rng = np.random.default_rng(100 + trial)
        for name, build, leaves in _op_cases(rng):
            try:
                assert_grads_match(build, leaves)
            except AssertionError as exc:
                raise AssertionError(f"op {name} trial {trial}: {exc}") from exc
            trials += 1
    assert trials >= 50


def test_composite_chain_gradient():
    # exercise a deeper mixed graph of the network ops
    rng = np.random.default_rng(200)
    x = leaf((2, 6, 3), rng)
    w1 = leaf((4, 2), rng)
    b1 = leaf((4,), rng)
    wt = leaf((4, 4, 3), rng)
    adj = tc.Tensor(rng.uniform(0.0, 1.0, (6, 3, 3)), requires_grad=True)
    slope = tc.Tensor(0.25, requires_grad=True)

    def build(x, w1, b1, wt, adj, slope):
        h = tc.pointwise_mix(x, w1, b1)
        h = tc.conv_time(h, wt, padding=1)
        h = tc.transpose(h, (1, 2, 0))
        h = tc.graph_aggregate(adj, h)
        h = tc.prelu(h, slope)
        return tc.tensor_mean(tc.mul(h, h))

    assert_grads_match(build, [x, w1, b1, wt, adj, slope])
