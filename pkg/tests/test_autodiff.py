import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lspstereo.autodiff import Adam, AdamState, Tape, Tensor, adam_step, finite_diff_check, ops
from lspstereo.autodiff.tensor import record


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv2d_loops(x, w, b, stride, pad, dil):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    OH = (H + 2 * pad - dil * (KH - 1) - 1) // stride + 1
    OW = (W + 2 * pad - dil * (KW - 1) - 1) // stride + 1
    out = np.zeros((B, O, OH, OW))
    for n in range(B):
        for o in range(O):
            for i in range(OH):
                for j in range(OW):
                    acc = b[o]
                    for c in range(C):
                        for ky in range(KH):
                            for kx in range(KW):
                                acc += xp[n, c, i * stride + ky * dil, j * stride + kx * dil] * w[o, c, ky, kx]
                    out[n, o, i, j] = acc
    return out


def conv3d_loops(x, w, b, stride, pad):
    B, C, D, H, W = x.shape
    O, _, KD, KH, KW = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    OD, OH, OW = ((s + 2 * pad - k) // stride + 1 for s, k in ((D, KD), (H, KH), (W, KW)))
    out = np.zeros((B, O, OD, OH, OW))
    for n in range(B):
        for o in range(O):
            for d in range(OD):
                for i in range(OH):
                    for j in range(OW):
                        patch = xp[n, :, d * stride:d * stride + KD, i * stride:i * stride + KH, j * stride:j * stride + KW]
                        out[n, o, d, i, j] = b[o] + (patch * w[o]).sum()
    return out


# ---------------------------------------------------------------------------
# tensor


def test_tensor_rank_limit():
    Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ValueError):
        Tensor(np.zeros((1,) * 6))


def test_tensor_integer_data_becomes_float():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_replay_twice_accumulates_double():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((1, 2, 5, 5)))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    with Tape() as tape:
        y = ops.reduce_mean(ops.relu(ops.conv2d(x, w, None, padding=1)))
    tape.backward(y)
    once = w.grad.copy(), x.grad.copy()
    tape.backward(y)
    assert np.array_equal(w.grad, 2 * once[0])
    assert np.array_equal(x.grad, 2 * once[1])


def test_reused_input_gets_each_use():
    x = t64([1.5, -2.0, 3.0])
    with Tape() as tape:
        y = ops.reduce_mean(ops.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data / 3)


def test_no_tape_means_no_records():
    x = t64([1.0, 2.0])
    y = ops.scale(x, 2.0)
    with Tape() as tape:
        z = ops.reduce_mean(y)
    tape.backward(z)
    assert x.grad is None


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).standard_normal((2, 1, 4, 5)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 2), (1, 2, 2), (2, 1, 1), (2, 3, 2)])
def test_conv2d_matches_loops(stride, pad, dil):
    rng = np.random.default_rng(stride * 10 + dil)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
    ref = conv2d_loops(x.astype(np.float64), w, b, stride, pad, dil)
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_conv2d_random_up_to_9x9():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
    w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32) * 0.1
    b = rng.standard_normal(3).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1, 1).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, 1, 1, 1), atol=1e-6)


def test_conv2d_errors():
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_fd():
    rng = np.random.default_rng(2)
    x, w, b = t64(rng.standard_normal((1, 2, 5, 5))), t64(rng.standard_normal((2, 2, 3, 3))), t64(rng.standard_normal(2))
    r = finite_diff_check(lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [x, w, b])
    assert r.max_rel_error < 1e-4


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_sum_of_ones():
    out = ops.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1, 1] == 27.0


def test_conv3d_identity_kernel():
    x = np.random.default_rng(3).standard_normal((1, 1, 3, 4, 5)).astype(np.float32)
    out = ops.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32)))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_matches_loops(stride, pad):
    rng = np.random.default_rng(stride + pad)
    x = rng.standard_normal((2, 4, 5, 9, 9)).astype(np.float32)
    w = (0.2 * rng.standard_normal((3, 4, 3, 3, 3))).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv3d_loops(x.astype(np.float64), w, b, stride, pad), atol=1e-5)


def test_conv3d_errors():
    with pytest.raises(ValueError):
        ops.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


# ---------------------------------------------------------------------------
# activations, softmax, pointwise, reductions


def test_activation_values():
    assert ops.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    r = ops.activation(Tensor([-2.5, 2.5]), "relu").data
    assert r[0] == 0.0 and r[1] == 2.5
    with pytest.raises(ValueError):
        ops.activation(Tensor([0.0]), "tanh")


def test_sigmoid_gradient_at_zero():
    x = t64([0.0])
    with Tape() as tape:
        y = ops.sigmoid(x)
    tape.backward(y)
    assert x.grad[0] == pytest.approx(0.25)
    h = 1e-4
    fd = (1 / (1 + math.exp(-h)) - 1 / (1 + math.exp(h))) / (2 * h)
    assert x.grad[0] == pytest.approx(fd, rel=1e-8)


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax_axis(Tensor(np.zeros((5, 2))), 0).data, 0.2)
    np.testing.assert_allclose(ops.softmax_axis(t64([0.0, math.log(3)]), 0).data, [0.25, 0.75], atol=1e-12)
    big = ops.softmax_axis(t64([1000.0, 1001.0]), 0).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [0.2689414213699951, 0.7310585786300049], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-500, 500)), st.integers(0, 2))
def test_softmax_normalized(x, axis):
    p = ops.softmax_axis(Tensor(x), axis).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-6)


def test_upsample_constant_and_nearest():
    c = Tensor(np.full((1, 2, 3, 4), 7.0))
    for mode in ("nearest", "bilinear"):
        np.testing.assert_allclose(ops.upsample2x(c, mode).data, 7.0)
    out = ops.upsample2x(t64([[[[1.0, 2.0]]]]), "nearest").data
    assert out.shape == (1, 1, 2, 4)
    np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_upsample_bilinear_ramp():
    ramp = np.tile(np.arange(6, dtype=np.float64), (1, 1, 4, 1)) * 0.7 + 0.3
    out = ops.upsample2x(Tensor(ramp), "bilinear").data[0, 0]
    # half-pixel centres: output column j sits at input coordinate (j + 0.5) / 2 - 0.5
    coords = (np.arange(12) + 0.5) / 2 - 0.5
    expected = 0.7 * np.clip(coords, 0, 5) + 0.3
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-6)
    # away from the border clamp the ramp is reproduced exactly
    for row in out:
        np.testing.assert_allclose(row[1:-1], 0.7 * coords[1:-1] + 0.3, atol=1e-6)


def test_pointwise_examples():
    a, b = t64(np.ones((1, 2, 2, 2))), t64(2 * np.ones((1, 3, 2, 2)))
    cat = ops.pointwise(a, b, "concat_channels").data
    assert cat.shape == (1, 5, 2, 2)
    assert np.all(cat[:, :2] == 1) and np.all(cat[:, 2:] == 2)
    x = t64(np.random.default_rng(0).standard_normal((2, 3)))
    assert np.array_equal(ops.pointwise(x, t64(np.zeros((2, 3))), "add").data, x.data)
    with pytest.raises(ValueError):
        ops.pointwise(x, t64(np.zeros((3, 2))), "add")
    with pytest.raises(ValueError):
        ops.pointwise(a, t64(np.zeros((1, 2, 3, 2))), "concat_channels")


def test_mul_gradient_is_other_operand():
    rng = np.random.default_rng(4)
    a, b = t64(rng.standard_normal((2, 3))), t64(rng.standard_normal((2, 3)))
    with Tape() as tape:
        y = ops.reduce_mean(ops.mul(a, b))
    tape.backward(y)
    np.testing.assert_allclose(a.grad, b.data / 6)
    r = finite_diff_check(lambda a, b: ops.pointwise(a, b, "mul"), [a, b])
    assert r.max_rel_error < 1e-4


def test_reduce_mean_examples():
    assert ops.reduce_mean(t64([1.0, 2.0, 3.0])).data == 2.0
    x = t64([4.0, 5.0, 6.0])
    assert ops.reduce_mean(x, np.array([0, 1, 0])).data == 5.0
    with pytest.raises(ValueError, match="no valid pixels"):
        ops.reduce_mean(x, np.zeros(3))


def test_reduce_mean_gradient():
    x = t64([1.0, 2.0, 3.0, 4.0])
    mask = np.array([1, 0, 1, 1])
    with Tape() as tape:
        y = ops.reduce_mean(x, mask)
    tape.backward(y)
    np.testing.assert_allclose(x.grad, mask / 3)
    assert finite_diff_check(lambda x: ops.reduce_mean(x, mask), [x]).max_rel_error < 1e-4


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    state = adam_step([p], [np.zeros(2)], AdamState())
    assert np.array_equal(p, [1.0, -2.0]) and state.t == 1


def test_adam_first_step():
    p = np.array([0.5])
    adam_step([p], [np.array([1.0])], AdamState(lr=0.001))
    assert p[0] == pytest.approx(0.5 - 0.001, abs=1e-9)


def test_adam_two_steps_hand_oracle():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = np.array([1.0, -1.0])
    g1, g2 = np.array([0.3, -0.2]), np.array([0.1, 0.4])
    state = AdamState(lr=lr)
    adam_step([p], [g1], state)
    adam_step([p], [g2], state)
    m = (1 - b1) * g1
    v = (1 - b2) * g1 ** 2
    q = np.array([1.0, -1.0]) - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 ** 2
    q = q - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(p, q, rtol=1e-12)
    assert state.t == 2


def test_adam_rejects_nan():
    with pytest.raises(FloatingPointError):
        adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], AdamState())


def test_adam_optimizer_wrapper():
    w = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            loss = ops.reduce_mean(ops.mul(w, w))
        tape.backward(loss)
        opt.step()
    assert abs(w.data[0]) < 0.05
    assert len(opt.state.m) == 1 and opt.state.m[0].shape == w.shape


# ---------------------------------------------------------------------------
# finite-difference checker


def test_fd_linear_op_exact():
    rng = np.random.default_rng(0)
    a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))
    assert finite_diff_check(ops.add, [a, b]).max_rel_error < 1e-9


def test_fd_conv2d():
    rng = np.random.default_rng(1)
    x, w = t64(rng.standard_normal((2, 3, 6, 6))), t64(rng.standard_normal((2, 3, 3, 3)))
    assert finite_diff_check(lambda x, w: ops.conv2d(x, w, None, 1, 1), [x, w], h=1e-4).max_rel_error < 1e-4


def test_fd_catches_corrupted_backward():
    def bad_square(x):
        return record("bad_square", [x], x.data ** 2, lambda g: (g * 4 * x.data,))

    r = finite_diff_check(bad_square, [t64([0.7, -1.3, 2.1])])
    assert r.max_rel_error > 0.3 and not r.passed


def test_fd_needs_float64():
    with pytest.raises(ValueError):
        finite_diff_check(ops.relu, [Tensor(np.ones(3, dtype=np.float32), requires_grad=True)])


def test_fd_rejects_nonfinite():
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        finite_diff_check(lambda x: ops.log(x), [t64([0.0, 1.0])])


def test_fd_skips_kink_straddling_points():
    r = finite_diff_check(ops.relu, [t64([0.5, 2e-5, -1.0])])
    assert r.skipped == 1 and r.n_elements == 2 and r.passed
