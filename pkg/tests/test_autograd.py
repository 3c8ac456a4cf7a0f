import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascnn.autograd import (
    ShapeError,
    Tensor,
    avg_pool_2x2,
    concat_channels,
    conv2d,
    dot,
    grad_check,
    mse,
    prelu,
    total,
    transposed_conv2d,
    upsample_nearest_2x,
)
from oracles import block_mean_loops, conv2d_loops, mse_loop, strided_conv_matrix, tconv_scatter_loops


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


# conv2d ---------------------------------------------------------------------

def test_conv2d_ones_padding_arithmetic():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0])).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == 6


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.random((2, 1, 5, 7)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(T(x), T(k), T([0.0])).data, x)


def test_conv2d_matches_nested_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = conv2d(T(x), T(w), T(b)).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b), atol=1e-5)


def test_conv2d_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError) as info:
        conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((3, 5, 3, 3))))
    assert (1, 2, 4, 4) in info.value.shapes


# transposed conv ------------------------------------------------------------

def test_tconv_zero_input_gives_zero_output():
    out = transposed_conv2d(T(np.zeros((2, 3, 4, 5))), T(np.ones((3, 2, 4, 4))), T([0.0, 0.0]))
    assert out.shape == (2, 2, 8, 10)
    assert not out.data.any()


def test_tconv_single_pixel_surviving_taps():
    out = transposed_conv2d(T(np.ones((1, 1, 1, 1))), T(np.ones((1, 1, 4, 4))), T([0.0]))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))
    np.testing.assert_allclose(out.data, tconv_scatter_loops(np.ones((1, 1, 1, 1)), np.ones((1, 1, 4, 4)), [0.0]))


def test_tconv_matches_scatter_loops(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(transposed_conv2d(T(x), T(w), T(b)).data,
                               tconv_scatter_loops(x, w, b), atol=1e-5)


def test_tconv_is_adjoint_of_strided_conv(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 4, 4))
    m = strided_conv_matrix(1, 1, 4, 4, w)
    expected = (m.T @ x.reshape(-1)).reshape(1, 1, 8, 8)
    np.testing.assert_allclose(transposed_conv2d(T(x), T(w)).data, expected, atol=1e-5)


def test_tconv_channel_mismatch():
    with pytest.raises(ShapeError):
        transposed_conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((3, 1, 4, 4))))


# pooling / upsampling -------------------------------------------------------

def test_avg_pool_block():
    assert avg_pool_2x2(T([[[[0, 0], [1, 1]]]])).data.item() == 0.5


def test_avg_pool_constant():
    out = avg_pool_2x2(T(np.full((2, 3, 6, 4), 0.7)))
    assert out.shape == (2, 3, 3, 2)
    np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)


def test_avg_pool_matches_loops(rng):
    x = rng.random((1, 1, 6, 6))
    np.testing.assert_allclose(avg_pool_2x2(T(x)).data, block_mean_loops(x), atol=1e-6)


def test_avg_pool_odd_size_rejected():
    with pytest.raises(ShapeError):
        avg_pool_2x2(T(np.zeros((1, 1, 5, 4))))


def test_upsample_replicates():
    out = upsample_nearest_2x(T([[[[1, 2], [3, 4]]]])).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_pool_of_upsample_is_exact(rng):
    x = rng.random((2, 3, 5, 4)).astype(np.float32)
    np.testing.assert_array_equal(avg_pool_2x2(upsample_nearest_2x(T(x))).data, x)


def test_upsample_gradient_of_sum_is_four(rng):
    x = T(rng.random((1, 2, 3, 3)), grad=True)
    total(upsample_nearest_2x(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))


# concat ---------------------------------------------------------------------

@pytest.mark.parametrize("widths,total_width", [((256, 256, 1), 513), ((128, 128, 1), 257)])
def test_concat_widths(widths, total_width):
    parts = [T(np.zeros((1, c, 2, 2))) for c in widths]
    assert concat_channels(parts).shape == (1, total_width, 2, 2)


def test_concat_single_part_identity(rng):
    x = T(rng.random((1, 3, 2, 2)))
    assert concat_channels([x]) is x


def test_concat_order_and_spatial_mismatch(rng):
    a, b = rng.random((1, 1, 2, 2)), rng.random((1, 2, 2, 2))
    out = concat_channels([T(a), T(b)]).data
    np.testing.assert_allclose(out[:, :1], a, rtol=1e-6)
    np.testing.assert_allclose(out[:, 1:], b, rtol=1e-6)
    with pytest.raises(ShapeError) as info:
        concat_channels([T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 4, 2)))])
    assert info.value.shapes == [(1, 1, 2, 2), (1, 1, 4, 2)]


# prelu ----------------------------------------------------------------------

def test_prelu_negative_and_positive():
    a = T([0.25])
    assert prelu(T([[[[-2.0]]]]), a).data.item() == -0.5
    np.testing.assert_array_equal(prelu(T([[[[0.0, 3.5]]]]), T([7.0])).data, [[[[0.0, 3.5]]]])


def test_prelu_slope_gradient_analytic():
    a = T([0.25], grad=True)
    total(prelu(T([[[[-3.0]]]]), a)).backward()
    assert a.grad.item() == -3.0


def test_prelu_slope_length_mismatch():
    with pytest.raises(ShapeError):
        prelu(T(np.zeros((1, 2, 2, 2))), T([0.25]))


# mse / backward -------------------------------------------------------------

def test_mse_examples(rng):
    x = rng.random((2, 1, 4, 4))
    assert mse(T(x), T(x)).item() == 0
    np.testing.assert_allclose(mse(T(x + 0.1), T(x)).item(), 0.01, rtol=1e-4)
    y = rng.random((2, 1, 4, 4))
    np.testing.assert_allclose(mse(T(x), T(y)).item(), mse_loop(x, y), rtol=1e-6)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 2, 3))))


def test_backward_square():
    x = T([3.0], grad=True)
    mse(x, T([0.0])).backward()
    assert x.grad.item() == 6.0


def test_backward_fan_out_accumulates(rng):
    x = T(rng.random((1, 2, 2, 2)), grad=True)
    total(concat_channels([x, x])).backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 2.0))


def test_backward_k_consumers_sum(rng):
    x = T(rng.random((1, 1, 4, 4)), grad=True)
    w = [T(rng.standard_normal((1, 1, 3, 3))) for _ in range(3)]
    out = concat_channels([conv2d(x, wi) for wi in w])
    u = rng.standard_normal(out.shape)
    dot(out, u).backward()
    fused = x.grad.copy()
    parts = []
    for k, wi in enumerate(w):
        xi = T(x.data, grad=True)
        dot(conv2d(xi, wi), u[:, k:k + 1]).backward()
        parts.append(xi.grad)
    np.testing.assert_allclose(fused, sum(parts), rtol=1e-5, atol=1e-6)


def test_backward_requires_scalar(rng):
    x = T(rng.random((1, 1, 2, 2)), grad=True)
    with pytest.raises(ShapeError):
        upsample_nearest_2x(x).backward()


def test_tensor_rejects_empty_dimension():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2)))


# finite-difference gradient checks ------------------------------------------

def test_gradcheck_conv2d(rng):
    err = grad_check(conv2d, [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)),
                              rng.standard_normal(3)])
    assert err < 1e-3


def test_gradcheck_transposed_conv2d(rng):
    err = grad_check(transposed_conv2d, [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4)),
                                         rng.standard_normal(3)])
    assert err < 1e-3


def test_gradcheck_prelu(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    x[np.abs(x) < 0.05] = 0.5  # keep central differences off the kink
    assert grad_check(prelu, [x, rng.uniform(0.1, 0.4, 3)], wrt=[1]) < 1e-3
    assert grad_check(prelu, [x, rng.uniform(0.1, 0.4, 3)]) < 1e-3


@pytest.mark.parametrize("op,shape", [(avg_pool_2x2, (1, 2, 4, 6)), (upsample_nearest_2x, (1, 2, 3, 2))])
def test_gradcheck_resampling(op, shape, rng):
    assert grad_check(op, [rng.standard_normal(shape)]) < 1e-3


def test_gradcheck_concat_and_mse(rng):
    parts = [rng.standard_normal((1, c, 2, 2)) for c in (1, 2, 3)]
    assert grad_check(lambda *p: concat_channels(p), parts) < 1e-3
    assert grad_check(mse, [rng.standard_normal((1, 1, 3, 3)), rng.standard_normal((1, 1, 3, 3))]) < 1e-3


# properties -----------------------------------------------------------------

dims = st.integers(min_value=1, max_value=4)


@settings(max_examples=25, deadline=None)
@given(n=dims, cin=dims, cout=dims, h=dims, w=dims, seed=st.integers(0, 2**31 - 1))
def test_conv2d_adjointness(n, cin, cout, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, h, w)).astype(np.float32)
    k = r.standard_normal((cout, cin, 3, 3)).astype(np.float32)
    u = r.standard_normal((n, cout, h, w))
    xt = T(x, grad=True)
    dot(conv2d(xt, T(k)), u).backward()
    lhs = np.vdot(conv2d(T(x), T(k)).data.astype(np.float64), u)
    rhs = np.vdot(x.astype(np.float64), xt.grad.astype(np.float64))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


@settings(max_examples=25, deadline=None)
@given(n=dims, cin=dims, cout=dims, h=dims, w=dims, seed=st.integers(0, 2**31 - 1))
def test_tconv_adjointness(n, cin, cout, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, h, w)).astype(np.float32)
    k = r.standard_normal((cin, cout, 4, 4)).astype(np.float32)
    u = r.standard_normal((n, cout, 2 * h, 2 * w))
    xt = T(x, grad=True)
    dot(transposed_conv2d(xt, T(k)), u).backward()
    lhs = np.vdot(transposed_conv2d(T(x), T(k)).data.astype(np.float64), u)
    rhs = np.vdot(x.astype(np.float64), xt.grad.astype(np.float64))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(-3, 3), beta=st.floats(-3, 3),
       op=st.sampled_from(["conv", "tconv"]))
def test_linearity_without_bias(seed, alpha, beta, op):
    r = np.random.default_rng(seed)
    if op == "conv":
        f, k = conv2d, r.standard_normal((2, 3, 3, 3))
    else:
        f, k = transposed_conv2d, r.standard_normal((3, 2, 4, 4))
    x, y = r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 4, 4))
    kt = Tensor(k, dtype=np.float64)
    lhs = f(Tensor(alpha * x + beta * y, dtype=np.float64), kt).data
    rhs = alpha * f(Tensor(x, dtype=np.float64), kt).data + beta * f(Tensor(y, dtype=np.float64), kt).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_pool_then_upsample_preserves_block_means(seed):
    x = np.random.default_rng(seed).random((1, 2, 6, 4)).astype(np.float32)
    y = upsample_nearest_2x(avg_pool_2x2(T(x)))
    np.testing.assert_allclose(avg_pool_2x2(y).data, avg_pool_2x2(T(x)).data, rtol=0, atol=0)
