import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pclnet import autodiff as ad
from pclnet.autodiff import Tensor
from pclnet.selftest import GRAD_CASES, conv2d_loop, gradient_suite

from conftest import tensor


# -- conv2d ----------------------------------------------------------------------


def test_conv_scalar_kernel_scales():
    out = ad.conv2d(tensor(np.ones((1, 1, 3, 3))), tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_box_kernel_padded_counts():
    out = ad.conv2d(tensor(np.ones((1, 1, 3, 3))), tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expected = conv2d_loop(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)[0, 0]
    np.testing.assert_array_equal(out, expected)
    assert out[1, 1] == 9 and out[0, 1] == 6 and out[0, 0] == 4


def test_conv_strided_shape(rng):
    out = ad.conv2d(tensor(rng.standard_normal((1, 3, 8, 8))), tensor(rng.standard_normal((5, 3, 3, 3))),
                    stride=2, padding=1)
    assert out.shape == (1, 5, 4, 4)


@pytest.mark.parametrize("seed", range(6))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(3, 10), rng.integers(3, 10)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((3, c, 3, 3))
    b = rng.standard_normal(3)
    for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)]:
        if min(h, w) + 2 * pad < dil * 2 + 1:
            continue
        got = ad.conv2d(tensor(x), tensor(wt), tensor(b), stride, pad, dil).data
        np.testing.assert_allclose(got, conv2d_loop(x, wt, b, stride, pad, dil), rtol=0, atol=1e-10)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(tensor(np.zeros((1, 2, 4, 4))), tensor(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_bad_stride():
    with pytest.raises(ValueError, match="stride"):
        ad.conv2d(tensor(np.zeros((1, 1, 4, 4))), tensor(np.zeros((1, 1, 3, 3))), stride=0)


# -- elementwise -------------------------------------------------------------------


def test_sigmoid_of_zero():
    np.testing.assert_array_equal(ad.sigmoid(tensor(np.zeros((1, 2, 2, 2)))).data, 0.5)


def test_mul_by_zeros(rng):
    x = tensor(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(ad.mul(x, tensor(np.zeros((1, 2, 3, 3)))).data, 0.0)


def test_tanh_value():
    out = ad.tanh(tensor(np.full((1, 1, 1, 1), 0.5))).item()
    assert out == pytest.approx(math.tanh(0.5), abs=1e-15)
    assert out == pytest.approx(0.462117, abs=1e-6)


def test_binary_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros((1, 1, 2, 3))))


def test_sigmoid_saturates_without_overflow():
    out = ad.sigmoid(tensor(np.array([-1e4, 1e4]).reshape(1, 1, 1, 2))).data
    assert np.all(np.isfinite(out))


# -- pooling, concat, upsampling ----------------------------------------------------


def test_avg_pool_constant(rng):
    out = ad.avg_pool2d(tensor(np.full((1, 2, 8, 8), 0.7)), 2)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_avg_pool_hand_mean():
    out = ad.avg_pool2d(tensor(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)), 2)
    assert out.item() == 2.5


def test_avg_pool_shape_and_drop_partial():
    assert ad.avg_pool2d(tensor(np.zeros((1, 1, 4, 4))), 2, 2).shape == (1, 1, 2, 2)
    assert ad.avg_pool2d(tensor(np.zeros((1, 1, 5, 7))), 2, 2).shape == (1, 1, 2, 3)


def test_avg_pool_rejects_zero_window():
    with pytest.raises(ValueError):
        ad.avg_pool2d(tensor(np.zeros((1, 1, 4, 4))), 0)


def test_concat_single_is_identity(rng):
    x = tensor(rng.standard_normal((1, 2, 4, 4)))
    np.testing.assert_array_equal(ad.concat_channels([x]).data, x.data)


def test_concat_channel_sum_and_backward(rng):
    a = tensor(rng.standard_normal((1, 2, 4, 4)), grad=True)
    b = tensor(rng.standard_normal((1, 3, 4, 4)), grad=True)
    out = ad.concat_channels([a, b])
    assert out.shape == (1, 5, 4, 4)
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 1.0)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ad.concat_channels([tensor(np.zeros((1, 1, 4, 4))), tensor(np.zeros((1, 1, 4, 5)))])


def test_upsample_constant():
    out = ad.upsample2x_bilinear(tensor(np.full((1, 1, 3, 5), 1.5)))
    assert out.shape == (1, 1, 6, 10)
    np.testing.assert_allclose(out.data, 1.5, atol=1e-15)


def test_upsample_half_pixel_weights():
    out = ad.upsample2x_bilinear(tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(out.data[0, 0], [[0.0, 0.25, 0.75, 1.0], [0.0, 0.25, 0.75, 1.0]])


def test_upsample_shape():
    assert ad.upsample2x_bilinear(tensor(np.zeros((1, 4, 7, 9)))).shape == (1, 4, 14, 18)


# -- backward semantics -----------------------------------------------------------


def test_grad_of_sum_is_ones(rng):
    x = tensor(rng.standard_normal((2, 3, 4, 5)), grad=True)
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_grad_of_square_sum():
    x = tensor(np.full((1, 2, 2, 2), 3.0), grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 6.0)


def test_two_uses_add(rng):
    x = tensor(rng.standard_normal((1, 1, 3, 3)), grad=True)
    ad.backward(ad.add(ad.sum(x), ad.sum(ad.scale(x, 2.0))))
    np.testing.assert_allclose(x.grad, 3.0)


def test_backward_rejects_non_scalar(rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with pytest.raises(ValueError, match="1x1x1x1"):
        ad.backward(ad.scale(x, 2.0))


def test_backward_rejects_empty_tape():
    with pytest.raises(ValueError, match="empty"):
        ad.backward(tensor(np.zeros((1, 1, 1, 1))))


def test_unreachable_grad_untouched(rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    y = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    y.grad = np.full((1, 1, 2, 2), 7.0)
    ad.scale(y, 3.0)  # recorded, but not part of the loss
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(y.grad, 7.0)


def test_grads_are_not_accumulated_across_calls(rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    for _ in range(2):
        ad.backward(ad.sum(ad.scale(x, 2.0)))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_no_grad_records_nothing(fresh_tape, rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with ad.no_grad():
        y = ad.sigmoid(x)
    assert len(fresh_tape) == 0 and not y.requires_grad


def test_reverse_order_visits_each_node_once(rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2)), grad=True)
    visits = []
    with ad.use_tape() as tape:
        y = ad.tanh(x)
        z = ad.sum(ad.mul(y, y))
        for node in tape.nodes:
            fn = node.backward_fn
            node.backward_fn = (lambda f, name: (lambda g: (visits.append(name), f(g))[1]))(fn, node.name)
        ad.backward(z, tape)
    assert visits == ["sum", "mul", "tanh"]


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)

    def l1():
        return ad.sum(ad.tanh(ad.conv2d(x, w, padding=1)))

    def l2():
        return ad.sum(ad.square(ad.sigmoid(x)))

    grads = []
    for f in (l1, l2):
        with ad.use_tape() as tape:
            ad.backward(f(), tape)
        grads.append((x.grad.copy(), w.grad.copy() if f is l1 else np.zeros_like(w.data)))
    with ad.use_tape() as tape:
        ad.backward(ad.add(ad.scale(l1(), a), ad.scale(l2(), b)), tape)
    np.testing.assert_allclose(x.grad, a * grads[0][0] + b * grads[1][0], atol=1e-10)
    np.testing.assert_allclose(w.grad, a * grads[0][1], atol=1e-10)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(w), padding=1, dilation=2).data
    b = ad.conv2d(Tensor(x), Tensor(w), padding=1, dilation=2).data
    assert a.tobytes() == b.tobytes()


def test_float32_stays_float32(rng):
    x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), requires_grad=True)
    loss = ad.mean(ad.power(ad.add_scalar(ad.square(ad.conv2d(x, w, padding=1)), 1e-3), 0.4))
    assert loss.dtype == np.float32
    ad.backward(loss)
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


# -- gradient checks ------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check_primitive(name):
    for r in gradient_suite(seeds=range(5), names={name}):
        assert r.error <= 1e-4, (r.name, r.seed, r.error)


def test_grad_check_detects_wrong_gradient(rng):
    def bad_square(x):
        return ad._result(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2

    x = Tensor(rng.uniform(0.5, 1.0, (1, 1, 2, 2)))
    assert ad.grad_check(lambda t: ad.sum(bad_square(t)), [x]) > 0.1


def test_all_grad_cases_registered():
    assert {"conv2d", "inverse_warp", "convlstm_step", "charbonnier_loss", "psnr_loss", "mssim_loss", "epe"} <= set(GRAD_CASES)
