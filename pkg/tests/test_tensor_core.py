import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multiprior import kernels
from multiprior import tensor_core as tc
from multiprior.gradcheck import gradcheck
from multiprior.tensor_core import BatchNormState, Parameter, Tensor


def f64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def probe(rng, shape):
    return rng.normal(size=shape)


def test_conv_delta_kernel_crops(rng):
    x = rng.normal(size=(1, 1, 6, 7, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3, 3), np.float32)
    w[0, 0, 1, 1, 1] = 1
    out = tc.conv3d_valid(Tensor(x), Parameter(w), Parameter(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x[:, :, 1:-1, 1:-1, 1:-1])


def test_conv_ones_counts():
    out = tc.conv3d_valid(Tensor(np.ones((1, 1, 5, 5, 5))), Parameter(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 3, 3, 3) and np.all(out.data == 27)


def test_conv_undersized():
    with pytest.raises(ValueError):
        tc.conv3d_valid(Tensor(np.ones((1, 1, 2, 5, 5))), Parameter(np.ones((1, 1, 3, 3, 3))))


def test_numpy_and_torch_kernels_agree(rng):
    if kernels._load_torch() is False:
        pytest.skip("torch not installed")
    x = rng.normal(size=(2, 3, 7, 6, 8))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    g = rng.normal(size=(2, 4, 5, 4, 6))
    prev = kernels.get_backend()
    try:
        kernels.set_backend("numpy")
        a = kernels.conv3d_forward(x, w), kernels.conv3d_backward(x, w, g)
        kernels.set_backend("torch")
        b = kernels.conv3d_forward(x, w), kernels.conv3d_backward(x, w, g)
    finally:
        kernels.set_backend(prev)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1][0], b[1][0], atol=1e-12)
    np.testing.assert_allclose(a[1][1], b[1][1], atol=1e-12)


@pytest.mark.parametrize("padding", [0, 1])
def test_torch_double_precision_slabs(rng, monkeypatch, padding):
    if kernels._load_torch() is False:
        pytest.skip("torch not installed")
    x = rng.normal(size=(2, 3, 11, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    prev = kernels.get_backend()
    try:
        kernels.set_backend("numpy")
        ref = kernels.conv3d_forward(x, w, padding)
        kernels.set_backend("torch")
        monkeypatch.setattr(kernels, "SLAB_BYTES", 1)       # one output plane per slab
        out = kernels.conv3d_forward(x, w, padding)
    finally:
        kernels.set_backend(prev)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("backend", ["numpy", "torch"])
@pytest.mark.parametrize("padding", [0, 1])
def test_conv_gradcheck(rng, backend, padding):
    if backend == "torch" and kernels._load_torch() is False:
        pytest.skip("torch not installed")
    prev = kernels.get_backend()
    kernels.set_backend(backend)
    try:
        x = f64(rng.normal(size=(1, 2, 5, 5, 5)))
        w = Parameter(rng.normal(size=(2, 2, 3, 3, 3)))
        b = Parameter(rng.normal(size=2))
        pw = probe(rng, tc.conv3d(x, w, b, padding).shape)
        rep = gradcheck(lambda: tc.weighted_sum(tc.conv3d(x, w, b, padding), pw), [x, w, b])
    finally:
        kernels.set_backend(prev)
    assert rep.passed, str(rep)


def test_conv_kernel_gradient_h_1e3(rng):
    x = f64(rng.normal(size=(1, 1, 5, 5, 5)), grad=False)
    w = Parameter(rng.normal(size=(1, 1, 3, 3, 3)))
    rep = gradcheck(lambda: tc.weighted_sum(tc.conv3d_valid(x, w), np.ones((1, 1, 3, 3, 3))),
                    [w], h=1e-3)
    assert rep.max_rel_error < 1e-3


def test_leaky_relu_values_and_grad():
    x = Tensor(np.array([2.0, -2.0, -1.0]).reshape(1, 3, 1, 1, 1), requires_grad=True)
    y = tc.leaky_relu(x, 0.3)
    np.testing.assert_allclose(y.data.ravel(), [2, -0.6, -0.3])
    y.backward(np.ones_like(y.data))
    np.testing.assert_allclose(x.grad.ravel(), [1, 0.3, 0.3])
    assert tc.leaky_relu(Tensor(np.ones((1, 30, 9, 9, 9)))).shape == (1, 30, 9, 9, 9)


def test_leaky_relu_gradcheck(rng):
    x = f64(rng.normal(size=(2, 3, 3, 3, 3)))
    pw = probe(rng, x.shape)
    assert gradcheck(lambda: tc.weighted_sum(tc.leaky_relu(x), pw), [x]).passed


def test_batch_norm_train_statistics(rng):
    st_ = BatchNormState.create(3, dtype=np.float64)
    x = Tensor(rng.normal(3, 2, size=(4, 3, 5, 5, 5)))
    y = tc.batch_norm(x, st_, "train").data
    assert np.abs(y.mean(axis=(0, 2, 3, 4))).max() < 1e-4
    assert np.abs(y.var(axis=(0, 2, 3, 4)) - 1).max() < 1e-4
    # running stats moved by (1 - momentum) of the batch statistics
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3, 4)))
    assert np.all(st_.running_var >= 0)


def test_batch_norm_infer_identity(rng):
    st_ = BatchNormState.create(2, dtype=np.float64)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    y = tc.batch_norm(Tensor(x), st_, "infer").data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5))
    with pytest.raises(ValueError):
        tc.batch_norm(Tensor(np.ones((1, 3, 2, 2, 2))), st_, "train")


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batch_norm_gradcheck(rng, mode):
    st_ = BatchNormState.create(4, dtype=np.float64)
    st_.gamma.data[:] = rng.normal(size=4)
    st_.beta.data[:] = rng.normal(size=4)
    st_.running_var[:] = rng.uniform(0.5, 2, size=4)
    x = f64(rng.normal(size=(2, 4, 4, 4, 4)))
    pw = probe(rng, x.shape)
    saved = (st_.running_mean.copy(), st_.running_var.copy())

    def fn():
        st_.running_mean[:], st_.running_var[:] = saved
        return tc.weighted_sum(tc.batch_norm(x, st_, mode), pw)

    rep = gradcheck(fn, [x, st_.gamma, st_.beta])
    assert rep.passed, str(rep)


def test_pointwise_dense(rng):
    x = rng.normal(size=(1, 2, 3, 3, 3))
    ident = tc.pointwise_dense(Tensor(x), Parameter(np.eye(2)), Parameter(np.zeros(2)))
    np.testing.assert_array_equal(ident.data, x)
    s = tc.pointwise_dense(Tensor(x), Parameter(np.ones((1, 2))))
    np.testing.assert_allclose(s.data[:, 0], x.sum(axis=1))
    xt, w, b = f64(x), Parameter(rng.normal(size=(3, 2))), Parameter(rng.normal(size=3))
    pw = probe(rng, (1, 3, 3, 3, 3))
    rep = gradcheck(lambda: tc.weighted_sum(tc.pointwise_dense(xt, w, b), pw), [xt, w, b])
    assert rep.max_rel_error < 1e-5


def test_softmax(rng):
    u = tc.softmax_channels(Tensor(np.zeros((1, 7, 2, 2, 2)))).data
    np.testing.assert_allclose(u, 1 / 7)
    big = tc.softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1, 1))).data
    np.testing.assert_array_equal(big.ravel(), [1.0, 0.0])
    x = f64(rng.normal(size=(2, 5, 3, 3, 3)) * 3)
    pw = probe(rng, x.shape)
    assert gradcheck(lambda: tc.weighted_sum(tc.softmax_channels(x), pw), [x]).passed


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.floats(0.1, 50), st.integers(0, 2**31 - 1))
def test_softmax_is_distribution(c, scale, seed):
    x = np.random.default_rng(seed).normal(size=(1, c, 2, 3, 2)) * scale
    y = tc.softmax_channels(Tensor(x)).data
    assert np.all(y >= 0) and np.abs(y.sum(axis=1) - 1).max() < 1e-6


def test_upsample_replicate(rng):
    one = tc.upsample_replicate(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), 3)
    assert one.shape == (1, 1, 3, 3, 3) and np.all(one.data == 2.5)
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    y = tc.upsample_replicate(x, 3)
    assert y.shape == (1, 2, 6, 6, 6)
    for i, j, k in np.ndindex(2, 2, 2):
        block = y.data[:, :, 3 * i:3 * i + 3, 3 * j:3 * j + 3, 3 * k:3 * k + 3]
        np.testing.assert_array_equal(block, np.broadcast_to(x.data[:, :, i:i + 1, j:j + 1, k:k + 1], block.shape))
    y.backward(np.ones_like(y.data))
    np.testing.assert_array_equal(x.grad, 27)


def test_pool_transpose_concat_crop_gradcheck(rng):
    x = f64(rng.normal(size=(1, 2, 4, 4, 4)))
    w = Parameter(rng.normal(size=(2, 3, 2, 2, 2)))
    b = Parameter(rng.normal(size=3))
    pw = probe(rng, (1, 5, 2, 2, 2))

    def fn():
        p = tc.avg_pool(x, 2)
        up = tc.conv_transpose2(p, w, b)
        cat = tc.concat([up, x], axis=1)
        return tc.weighted_sum(tc.crop_center(cat, (2, 2, 2)), pw)

    rep = gradcheck(fn, [x, w, b])
    assert rep.passed, str(rep)


def test_downsample_antialias():
    const = np.full((9, 9, 9), 3.0)
    np.testing.assert_allclose(tc.downsample_antialias(const), 3.0, rtol=1e-6)
    assert tc.downsample_antialias(np.zeros((57, 57, 57))).shape == (19, 19, 19)
    imp = np.zeros((15, 15, 15))
    imp[7, 7, 7] = 1
    sigma = 1.5
    r = int(3 * sigma)
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    oracle = np.einsum("i,j,k->ijk", k, k, k)
    blurred = tc.antialias_blur(imp, 3)
    np.testing.assert_allclose(blurred[7 - r:8 + r, 7 - r:8 + r, 7 - r:8 + r], oracle, atol=1e-7)
    # sampling keeps block centres
    np.testing.assert_allclose(tc.downsample_antialias(imp), blurred[1::3, 1::3, 1::3], atol=1e-7)
    # taps beyond 3 sigma (|offset| = 5) are cut
    assert blurred[7 + r + 1, 7, 7] == 0


def test_adam_first_step():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    tc.adam_step([p], lr=0.001)
    assert p.step == 1
    assert p.data[0] == pytest.approx(1 - 0.001 / (1 + 1e-7), rel=1e-9)


def test_adam_zero_grad_identity_and_decay():
    p = Parameter(np.array([0.7, -0.4]))
    tc.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [0.7, -0.4])
    assert p.step == 1
    tc.adam_step([p], lr=0.1, weight_decay=1e-5)
    assert p.data[0] < 0.7 and p.data[1] > -0.4
    q = Parameter(np.array([0.5]), decay=False)
    tc.adam_step([q], lr=0.1, weight_decay=1e-5)
    assert q.data[0] == 0.5


def test_gradcheck_flags_broken_backward(rng):
    x = f64(rng.normal(size=(1, 2, 3, 3, 3)))

    def broken():
        y = tc.leaky_relu(x)
        y._backward = lambda g: (2 * g,)
        return tc.weighted_sum(y, np.ones(x.shape))

    assert not gradcheck(broken, [x]).passed


def test_gradcheck_two_layer_stack(rng):
    x = f64(rng.normal(size=(1, 1, 7, 7, 7)))
    w1, w2 = Parameter(rng.normal(size=(2, 1, 3, 3, 3))), Parameter(rng.normal(size=(2, 2, 3, 3, 3)))
    pw = probe(rng, (1, 2, 3, 3, 3))
    rep = gradcheck(lambda: tc.weighted_sum(
        tc.conv3d_valid(tc.leaky_relu(tc.conv3d_valid(x, w1)), w2), pw), [x, w1, w2])
    assert rep.passed, str(rep)


def test_eight_layer_shrink():
    x = Tensor(np.zeros((1, 1, 17, 17, 17)))
    w = Parameter(np.zeros((1, 1, 3, 3, 3)))
    for _ in range(8):
        x = tc.conv3d_valid(x, w)
    assert x.shape[2:] == (1, 1, 1)
