import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrsdistill.errors import ConfigError, ShapeError
from mrsdistill.nn import layers as L


def naive_conv(x, w, stride):
    # direct loop over output positions with explicit zero padding
    b, n, _ = x.shape
    k, _, c_out = w.shape
    out, left, _ = L.same_padding(n, k, stride)
    y = np.zeros((b, out, c_out))
    for i in range(out):
        for t in range(k):
            src = i * stride + t - left
            if 0 <= src < n:
                y[:, i, :] += x[:, src, :] @ w[t]
    return y


def test_same_padding_keeps_length_at_stride_one():
    x = np.array([1.0, 2, 3, 4]).reshape(1, 4, 1)
    w = np.ones((2, 1, 1))
    y, _ = L.conv1d_forward(x, w, 1)
    assert y.ravel().tolist() == [3.0, 5.0, 7.0, 4.0]


def test_padding_split_for_width_32():
    assert L.same_padding(288, 32, 1) == (288, 15, 16)
    assert L.same_padding(144, 32, 2) == (72, 15, 15)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), k=st.integers(1, 7), c_in=st.integers(1, 3), c_out=st.integers(1, 3),
       stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**31 - 1))
def test_conv_matches_direct_loop(n, k, c_in, c_out, stride, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, n, c_in))
    w = r.normal(size=(k, c_in, c_out))
    y, _ = L.conv1d_forward(x, w, stride)
    np.testing.assert_allclose(y, naive_conv(x, w, stride), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 12), k=st.integers(1, 6), stride=st.sampled_from([1, 2]),
       seed=st.integers(0, 2**31 - 1))
def test_conv_backward_is_adjoint_of_forward(n, k, stride, seed):
    # <conv(x), dy> is bilinear, so its gradients are exactly linear maps
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, n, 2))
    w = r.normal(size=(k, 2, 3))
    y, cache = L.conv1d_forward(x, w, stride)
    dy = r.normal(size=y.shape)
    dx, dw = L.conv1d_backward(dy, cache)
    dx_ref = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = 1.0
        dx_ref.flat[i] = np.sum(naive_conv(e.reshape(x.shape), w, stride) * dy)
    dw_ref = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros(w.size)
        e[i] = 1.0
        dw_ref.flat[i] = np.sum(naive_conv(x, e.reshape(w.shape), stride) * dy)
    np.testing.assert_allclose(dx, dx_ref, atol=1e-10)
    np.testing.assert_allclose(dw, dw_ref, atol=1e-10)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        L.conv1d_forward(np.zeros((1, 5, 2)), np.zeros((3, 1, 1)))


def test_batchnorm_train_normalizes_and_updates_running(rng):
    x = rng.normal(3.0, 2.0, size=(4, 10, 3))
    rm, rv = np.zeros(3), np.ones(3)
    y, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, train=True, eps=1e-5, momentum=0.9)
    np.testing.assert_allclose(y.mean(axis=(0, 1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1)), x.var(axis=(0, 1)) / (x.var(axis=(0, 1)) + 1e-5))
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 1)))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 5, 2))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    y, _ = L.batchnorm_forward(x, np.array([2.0, 1.0]), np.array([0.5, 0.0]), rm.copy(), rv.copy(),
                               train=False, eps=0.0)
    np.testing.assert_allclose(y, np.array([2.0, 1.0]) * (x - rm) / np.sqrt(rv) + np.array([0.5, 0.0]))


def test_batchnorm_empty_batch():
    with pytest.raises(ConfigError):
        L.batchnorm_forward(np.zeros((0, 3, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1),
                            train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_backward_finite_differences(rng, train):
    x = rng.normal(size=(3, 4, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    dy = rng.normal(size=x.shape)

    def f(xx, gg, bb):
        y, _ = L.batchnorm_forward(xx, gg, bb, np.array([0.3, -0.2]), np.array([1.5, 0.7]),
                                   train=train)
        return np.sum(y * dy)

    _, cache = L.batchnorm_forward(x, gamma, beta, np.array([0.3, -0.2]), np.array([1.5, 0.7]),
                                   train=train)
    dx, dg, db = L.batchnorm_backward(dy, cache)
    h = 1e-6
    for arr, grad in ((x, dx), (gamma, dg), (beta, db)):
        num = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            up = f(x, gamma, beta)
            arr.flat[i] = old - h
            down = f(x, gamma, beta)
            arr.flat[i] = old
            num.flat[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-8)


def test_maxpool_ties_route_to_first_and_odd_length():
    x = np.array([2.0, 2.0, 1.0, 5.0, 7.0]).reshape(1, 5, 1)
    y, cache = L.maxpool2_forward(x)
    assert y.ravel().tolist() == [2.0, 5.0, 7.0]
    dx = L.maxpool2_backward(np.ones_like(y), cache)
    assert dx.ravel().tolist() == [1.0, 0.0, 0.0, 1.0, 1.0]


def test_pad_channels_appends_zeros():
    x = np.ones((1, 2, 2))
    y = L.pad_channels(x, 5)
    assert y.shape == (1, 2, 5)
    assert y[..., 2:].sum() == 0


def test_softmax_shift_invariant_and_normalized(rng):
    z = rng.normal(size=(6, 2)) * 50
    p = L.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p, L.softmax(z + 1000.0))


def test_cross_entropy_clamps_zero_probability():
    loss = L.cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([1]))
    assert np.isfinite(loss) and loss > 600


def test_softmax_cross_entropy_gradient(rng):
    z = rng.normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    loss, dz = L.softmax_cross_entropy(z, y)
    h = 1e-6
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp.flat[i] += h
        zm.flat[i] -= h
        num = (L.softmax_cross_entropy(zp, y)[0] - L.softmax_cross_entropy(zm, y)[0]) / (2 * h)
        assert abs(num - dz.flat[i]) < 1e-8
    assert loss == pytest.approx(L.cross_entropy_loss(L.softmax(z), y))


def test_dropout_mask_scaling(rng):
    assert L.dropout_mask((3, 3), 0.0, rng) is None
    m = L.dropout_mask((200_000,), 0.55, rng)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.45}
    assert abs(m.mean() - 1.0) < 0.02
