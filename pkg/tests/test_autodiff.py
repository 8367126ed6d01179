"""Tape, op, and optimizer unit tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfprior import autodiff as ad


def tape64():
    return ad.Tape(np.float64)


# -- affine ------------------------------------------------------------------------

def test_affine_identity_weight():
    tape = tape64()
    w = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = ad.affine(tape.constant(np.eye(2)), tape.constant(w),
                    tape.constant(np.zeros(2)))
    np.testing.assert_array_equal(out.data, w)


def test_affine_hand_example():
    tape = tape64()
    out = ad.affine(tape.constant([[1.0, 2.0]]), tape.constant(np.eye(2)),
                    tape.constant([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [[4.0, 6.0]])


def naive_affine(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            out[i, j] = b[j]
            for k in range(x.shape[1]):
                out[i, j] += x[i, k] * w[k, j]
    return out


def test_affine_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.random((4, 3)), rng.random((3, 5)), rng.random(5)
    tape = tape64()
    out = ad.affine(tape.constant(x), tape.constant(w), tape.constant(b))
    np.testing.assert_allclose(out.data, naive_affine(x, w, b), atol=1e-12)


def test_affine_zero_weight_rows_equal_bias():
    rng = np.random.default_rng(1)
    tape = tape64()
    b = np.array([1.0, -2.0, 0.5])
    out = ad.affine(tape.constant(rng.random((6, 4))),
                    tape.constant(np.zeros((4, 3))), tape.constant(b))
    for row in out.data:
        np.testing.assert_array_equal(row, b)


def test_affine_shape_errors():
    tape = tape64()
    with pytest.raises(ad.ShapeError):
        ad.affine(tape.constant(np.ones((2, 3))), tape.constant(np.ones((4, 2))),
                  tape.constant(np.ones(2)))
    with pytest.raises(ad.ShapeError):
        ad.affine(tape.constant(np.ones(3)), tape.constant(np.ones((3, 2))),
                  tape.constant(np.ones(2)))


# -- activations ---------------------------------------------------------------------

def test_activation_values():
    tape = tape64()
    x = tape.constant([0.0])
    assert ad.relu(x).data[0] == 0.0
    assert ad.sigmoid(x).data[0] == 0.5
    one = tape.constant([1.0])
    np.testing.assert_allclose(ad.softplus(one).data[0], np.log(1 + np.e),
                               rtol=1e-12)


def test_activation_dispatch_and_unknown():
    tape = tape64()
    x = tape.constant([0.3])
    np.testing.assert_array_equal(ad.activation(x, "relu").data,
                                  ad.relu(tape.constant([0.3])).data)
    with pytest.raises(ValueError):
        ad.activation(x, "tanh")


def test_exp_clamp_and_zero_grad_in_clamped_region():
    tape = tape64()
    x = tape.tensor([100.0, 1.0], requires_grad=True)
    out = ad.exp(x)
    assert out.data[0] == pytest.approx(np.exp(ad.EXP_CLAMP))
    tape.backward(ad.sum_all(out))
    g = tape.grad_of(x)
    assert g[0] == 0.0
    assert g[1] == pytest.approx(np.e)


def test_sigmoid_overflow_safe():
    tape = tape64()
    out = ad.sigmoid(tape.constant([1000.0, -1000.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


# -- gather ---------------------------------------------------------------------------

def test_gather_single_row():
    tape = tape64()
    table = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    out = ad.gather_rows(table, [0])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_gather_duplicate_rows_accumulate():
    tape = tape64()
    table = tape.tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    out = ad.gather_rows(table, [2, 2])
    g1, g2 = np.array([1.0, 10.0]), np.array([100.0, 5.0])
    probe = tape.constant(np.stack([g1, g2]))
    tape.backward(ad.sum_all(ad.mul(out, probe)))
    grad = tape.grad_of(table)
    np.testing.assert_array_equal(grad[2], g1 + g2)
    assert not grad[[0, 1, 3]].any()


def test_gather_empty_indices():
    tape = tape64()
    table = tape.tensor(np.ones((4, 2)), requires_grad=True)
    out = ad.gather_rows(table, np.zeros(0, dtype=np.int64))
    assert out.data.shape == (0, 2)
    tape.backward(ad.sum_all(out))
    np.testing.assert_array_equal(tape.grad_of(table), np.zeros((4, 2)))


def test_gather_out_of_range():
    tape = tape64()
    table = tape.constant(np.ones((4, 2)))
    with pytest.raises(IndexError):
        ad.gather_rows(table, [4])


@given(st.lists(st.integers(min_value=0, max_value=3), min_size=1, max_size=8))
@settings(deadline=None, max_examples=40)
def test_gather_scatter_add_exhaustive(indices):
    """Backward of a gather is exact scatter-add for any duplicate pattern."""
    tape = tape64()
    table = tape.tensor(np.zeros((4, 2)), requires_grad=True)
    out = ad.gather_rows(table, indices)
    probe = np.arange(1.0, 1.0 + 2 * len(indices)).reshape(len(indices), 2)
    tape.backward(ad.sum_all(ad.mul(out, tape.constant(probe))))
    expected = np.zeros((4, 2))
    for k, i in enumerate(indices):
        expected[i] += probe[k]
    np.testing.assert_array_equal(tape.grad_of(table), expected)


# -- backward -----------------------------------------------------------------------

def test_backward_quadratic():
    tape = tape64()
    x = tape.tensor([3.0], requires_grad=True)
    tape.backward(ad.sum_all(ad.mul(x, x)))
    assert tape.grad_of(x)[0] == pytest.approx(6.0)


def test_backward_constant_loss_all_zero_grads():
    tape = tape64()
    x = tape.tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_all(tape.constant([5.0]))
    tape.backward(loss)
    np.testing.assert_array_equal(tape.grad_of(x), [0.0, 0.0])


def test_backward_rejects_nonscalar_loss():
    tape = tape64()
    x = tape.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.TapeError):
        tape.backward(ad.mul(x, x))


def test_foreign_tensor_rejected():
    t1, t2 = tape64(), tape64()
    a = t1.constant([1.0])
    b = t2.constant([1.0])
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


def test_nonfinite_forward_raises():
    tape = tape64()
    with pytest.raises(ad.NonFiniteError):
        tape.constant([np.nan])
    x = tape.constant([1e308])
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.mul(x, x)


def test_gradients_bit_identical_across_runs():
    def run():
        tape = ad.Tape(np.float32)
        rng = np.random.default_rng(7)
        x = tape.tensor(rng.random((5, 4)), requires_grad=True)
        w = tape.tensor(rng.random((4, 3)), requires_grad=True)
        h = ad.relu(ad.affine(x, w, tape.constant(np.zeros(3))))
        tape.backward(ad.mean_all(ad.mul(h, h)))
        return tape.grad_of(x).tobytes(), tape.grad_of(w).tobytes()

    assert run() == run()


# -- structural ops -----------------------------------------------------------------

def test_concat_slice_reshape_roundtrip_grads():
    tape = tape64()
    a = tape.tensor([[1.0, 2.0]], requires_grad=True)
    b = tape.tensor([[3.0]], requires_grad=True)
    cat = ad.concat([a, b], axis=-1)
    np.testing.assert_array_equal(cat.data, [[1.0, 2.0, 3.0]])
    piece = ad.slice_last(cat, 1, 3)
    tape.backward(ad.sum_all(ad.mul(piece, tape.constant([[10.0, 20.0]]))))
    np.testing.assert_array_equal(tape.grad_of(a), [[0.0, 10.0]])
    np.testing.assert_array_equal(tape.grad_of(b), [[20.0]])


def test_scale_rows():
    tape = tape64()
    x = tape.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    s = tape.tensor([2.0, -1.0], requires_grad=True)
    out = ad.scale_rows(x, s)
    np.testing.assert_array_equal(out.data, [[2.0, 4.0], [-3.0, -4.0]])
    tape.backward(ad.sum_all(out))
    np.testing.assert_array_equal(tape.grad_of(s), [3.0, 7.0])
    with pytest.raises(ad.ShapeError):
        ad.scale_rows(x, tape.constant([1.0, 2.0, 3.0]))


def test_exclusive_cumsum_forward_and_backward():
    tape = tape64()
    x = tape.tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    c = ad.exclusive_cumsum(x, axis=1)
    np.testing.assert_array_equal(c.data, [[0.0, 1.0, 3.0]])
    tape.backward(ad.sum_all(ad.mul(c, tape.constant([[10.0, 20.0, 30.0]]))))
    np.testing.assert_array_equal(tape.grad_of(x), [[50.0, 30.0, 0.0]])


def test_mse_value():
    tape = tape64()
    a = tape.constant([[1.0, 1.0]])
    b = tape.constant([[0.0, 2.0]])
    assert ad.mse(a, b).data.item() == pytest.approx(1.0)


# -- conv ops (denoiser support) -------------------------------------------------------

def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(3)
    x = rng.random((1, 5, 6, 2))
    w = rng.random((3, 3, 2, 4))
    b = rng.random(4)
    tape = tape64()
    out = ad.conv2d(tape.constant(x), tape.constant(w), tape.constant(b)).data

    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 6, 4)) + b
    for i in range(5):
        for j in range(6):
            patch = xp[0, i:i + 3, j:j + 3, :]
            ref[0, i, j] += np.einsum("ijc,ijco->o", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    x0 = rng.random((1, 4, 4, 2))
    w0 = rng.random((3, 3, 2, 3))
    probe = rng.random((1, 4, 4, 3))

    def fn(tape, flat):
        w = ad.reshape(flat, w0.shape)
        out = ad.conv2d(tape.constant(x0), w, tape.constant(np.zeros(3)))
        return ad.sum_all(ad.mul(out, tape.constant(probe)))

    assert ad.finite_diff_check(fn, w0.reshape(-1), 1e-6) < 1e-6


def test_pool_and_upsample_shapes_and_adjointness():
    tape = tape64()
    x = tape.tensor(np.arange(16.0).reshape(1, 4, 4, 1), requires_grad=True)
    pooled = ad.avg_pool2(x)
    assert pooled.data.shape == (1, 2, 2, 1)
    assert pooled.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    up = ad.upsample2(pooled)
    assert up.data.shape == (1, 4, 4, 1)
    with pytest.raises(ad.ShapeError):
        ad.avg_pool2(tape.constant(np.zeros((1, 3, 4, 1))))


# -- Adam ------------------------------------------------------------------------------

def test_adam_default_hyperparameters():
    st_ = ad.AdamState.for_param(np.zeros(1))
    assert st_.lr == 1e-3
    assert st_.beta1 == 0.9
    assert st_.beta2 == 0.99


def test_adam_first_step_moves_by_lr():
    param = np.array([1.0], dtype=np.float32)
    st_ = ad.AdamState.for_param(param, lr=1e-3)
    ad.adam_step(param, np.array([1.0], dtype=np.float32), st_)
    # bias correction makes mhat=g, vhat=g^2 -> unit step scaled by lr
    assert param[0] == pytest.approx(1.0 - 1e-3, abs=1e-8)


def test_adam_zero_grad_fresh_state_is_identity():
    param = np.array([3.0, -1.0], dtype=np.float32)
    st_ = ad.AdamState.for_param(param)
    ad.adam_step(param, np.zeros(2, dtype=np.float32), st_)
    np.testing.assert_array_equal(param, [3.0, -1.0])


@given(st.floats(min_value=-10, max_value=10, allow_nan=False),
       st.floats(min_value=1e-5, max_value=1.0))
@settings(deadline=None, max_examples=30)
def test_adam_zero_grad_fixed_point_property(value, lr):
    param = np.array([value], dtype=np.float64)
    st_ = ad.AdamState.for_param(param, lr=lr)
    for _ in range(3):
        ad.adam_step(param, np.zeros(1), st_)
    assert param[0] == value


def test_adam_shape_mismatch():
    param = np.zeros(2, dtype=np.float32)
    with pytest.raises(ad.ShapeError):
        ad.adam_step(param, np.zeros(3, dtype=np.float32),
                     ad.AdamState.for_param(param))


# -- finite_diff_check -----------------------------------------------------------------

def test_finite_diff_quadratic():
    def fn(tape, x):
        return ad.sum_all(ad.mul(x, x))

    err = ad.finite_diff_check(fn, np.array([1.0, -2.0, 3.0]), 1e-4)
    assert err < 1e-6


def test_finite_diff_constant_fn_zero_error():
    def fn(tape, x):
        return ad.sum_all(tape.constant([1.0]))

    assert ad.finite_diff_check(fn, np.array([1.0, 2.0]), 1e-4) == 0.0


def test_finite_diff_softplus_mlp():
    rng = np.random.default_rng(5)
    w1, b1 = rng.random((3, 4)), rng.random(4)
    x0 = rng.random((2, 3))

    def fn(tape, flat):
        x = ad.reshape(flat, (2, 3))
        h = ad.softplus(ad.affine(x, tape.constant(w1), tape.constant(b1)))
        return ad.sum_all(h)

    assert ad.finite_diff_check(fn, x0.reshape(-1), 1e-3) < 1e-4


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda t, x: ad.sum_all(x), np.ones(2), 0.0)
