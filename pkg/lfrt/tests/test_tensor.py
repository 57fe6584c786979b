import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lfrt import tensor as T
from lfrt.errors import NumericFault, ShapeError
from lfrt.gradcheck import grad_check


def naive_conv(x, w, stride):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for y in range(ho):
                for x_ in range(wo):
                    patch = x[b, :, y * stride:y * stride + kh, x_ * stride:x_ * stride + kw]
                    out[b, o, y, x_] = np.sum(patch * w[o])
    return out


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert_allclose(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)


def test_conv2d_depthwise_box_on_constant():
    x = T.Tensor(np.full((1, 4, 6, 6), 0.7))
    w = T.Tensor(np.full((4, 1, 3, 3), 1.0 / 9.0))
    out = T.conv2d(x, w, padding=1, groups=4)
    assert out.shape == (1, 4, 6, 6)
    assert_allclose(out.data, 0.7)


def test_conv2d_matches_loops(rng):
    x = rng.standard_normal((1, 1, 8, 8))
    w = rng.standard_normal((2, 1, 2, 2))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2)
    assert out.shape == (1, 2, 4, 4)
    assert_allclose(out.data, naive_conv(x, w, 2), atol=1e-12)


def test_conv2d_reflect_padding(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode='reflect')
    out = T.conv2d(T.Tensor(x), T.Tensor(w), padding=1)
    assert_allclose(out.data, naive_conv(padded, w, 1), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((2, 2, 1, 1))))


def test_attention_uniform_and_saturated(rng):
    q = T.Tensor(np.zeros((3, 2)))
    k = T.Tensor(rng.standard_normal((4, 2)))
    v = T.Tensor(rng.standard_normal((4, 5)))
    out, weights = T.scaled_dot_attention(q, k, v, return_weights=True)
    assert_allclose(weights.data, 0.25)
    assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)))

    keys = np.zeros((4, 2))
    keys[2] = [60.0, 0.0]
    out = T.scaled_dot_attention(T.Tensor(np.array([[1.0, 0.0]])), T.Tensor(keys), v)
    assert_allclose(out.data[0], v.data[2], atol=1e-12)


def test_attention_dense_oracle(rng):
    q, k, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    scores = q @ k.T / np.sqrt(2)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    out = T.scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v))
    assert_allclose(out.data, weights @ v, atol=1e-12)


def test_window_partition(rng):
    x = T.Tensor(rng.standard_normal((1, 3, 16, 16)))
    assert_array_equal(T.window_partition(x, 1).data, x.data)
    windows = T.window_partition(x, 4)
    assert windows.shape == (16, 3, 4, 4)
    assert_array_equal(windows.data[5], x.data[0, :, 4:8, 4:8])
    assert_array_equal(T.window_merge(windows, 4).data, x.data)
    with pytest.raises(ShapeError):
        T.window_partition(T.Tensor(np.zeros((1, 1, 6, 6))), 4)


def test_adaptive_avg_pool(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    assert_allclose(T.adaptive_avg_pool2d(T.Tensor(x), 4).data, x)
    assert_allclose(T.adaptive_avg_pool2d(T.Tensor(np.full((1, 1, 5, 7), 0.3)), 3).data, 0.3)
    pooled = T.adaptive_avg_pool2d(T.Tensor(x), 2).data
    assert_allclose(pooled[0, 0, 1, 0], x[0, 0, 2:, :2].mean())
    with pytest.raises(ShapeError):
        T.adaptive_avg_pool2d(T.Tensor(x), 5)


def test_backward_sum():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum(x).backward()
    assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_shared_node_and_disconnected_branch():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.Tensor(np.array([3.0]), requires_grad=True)
    unused = y * 2.0
    loss = T.sum(x * x + x)
    loss.backward()
    assert_allclose(x.grad, 2 * x.data + 1)
    assert y.grad is None or not np.any(y.grad)
    assert unused.shape == (1,)


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_two_layer_perceptron_gradients(rng):
    w1, b1 = rng.standard_normal((4, 5)), rng.standard_normal(5)
    w2 = rng.standard_normal((5, 2))
    x = rng.standard_normal((3, 4))

    def fn(w1, b1, w2):
        return T.sum(T.square(T.matmul(T.tanh(T.linear(T.Tensor(x), w1, b1)), w2)))
    report = grad_check(fn, [w1, b1, w2], tol=1e-6)
    assert report.passed, report


def test_unbroadcast_gradients():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.sum(a * b).backward()
    assert_allclose(b.grad, [2.0, 2.0, 2.0])
    assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert y._parents == ()


def test_checked_mode_raises_on_non_finite():
    x = T.Tensor(np.array([0.0, 1.0]))
    with T.checked(), np.errstate(divide='ignore'):
        with pytest.raises(NumericFault):
            T.log(x)
    with np.errstate(divide='ignore'):
        assert not np.isfinite(T.log(x).data[0])


def test_amax_splits_ties():
    x = T.Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    T.sum(T.amax(x, axis=1)).backward()
    assert_allclose(x.grad, [[0.0, 0.5, 0.5]])


def test_upsample_and_blur_downsample_shapes(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 8, 6)))
    assert T.upsample2x(x).shape == (2, 3, 16, 12)
    assert T.blur_downsample(x).shape == (2, 3, 4, 3)
    assert_allclose(T.blur_downsample(T.Tensor(np.full((1, 1, 8, 8), 0.4))).data, 0.4)
