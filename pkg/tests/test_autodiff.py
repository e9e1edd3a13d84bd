import numpy as np
import pytest

from xmdistill import autodiff as ad
from xmdistill.autodiff import Tensor, grad_check
from xmdistill.errors import ShapeError


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def test_grad_check_polynomial():
    x = t64([1.0, 2.0])
    err = grad_check(lambda ts: ad.tsum(ts[0] * ts[0]), [x])
    assert err <= 1e-8
    # analytic gradient is (2, 4)
    x.zero_grad()
    out = ad.tsum(x * x)
    out.backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_grad_check_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ShapeError):
        grad_check(lambda ts: ts[0] * 2.0, [x])


def test_grad_check_rejects_float32():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda ts: ad.tsum(ts[0]), [x])


def _check(fn, tensors, tol=1e-4):
    err = grad_check(fn, tensors)
    assert err <= tol, "grad error %g" % err


def test_elementwise_op_gradients():
    rng = np.random.default_rng(0)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.uniform(1.0, 2.0, size=(3, 4)))
    _check(lambda ts: ad.tsum(ts[0] + ts[1] * 2.0), [a, b])
    _check(lambda ts: ad.tsum(ts[0] * ts[1]), [a, b])
    _check(lambda ts: ad.tsum(ts[0] / ts[1]), [a, b])
    _check(lambda ts: ad.tsum(ad.neg(ts[0]) - ts[1]), [a, b])
    _check(lambda ts: ad.tsum(ad.power(ts[1], 1.7)), [a, b])
    _check(lambda ts: ad.tsum(ad.exp(ts[0] * 0.3)), [a])
    _check(lambda ts: ad.tsum(ad.log(ts[0])), [b])
    _check(lambda ts: ad.tsum(ad.sigmoid(ts[0])), [a])
    _check(lambda ts: ad.tsum(ad.relu(ts[0] + 0.05)), [a])
    _check(lambda ts: ad.tsum(ad.clamp_min(ts[0], 0.2)), [a])


def test_broadcasting_gradients():
    rng = np.random.default_rng(1)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4,)))
    c = t64(rng.normal(size=(3, 1)))
    _check(lambda ts: ad.tsum(ts[0] + ts[1]), [a, b])
    _check(lambda ts: ad.tsum(ts[0] * ts[1]), [a, c])


def test_reduction_and_shape_gradients():
    rng = np.random.default_rng(2)
    a = t64(rng.normal(size=(2, 3, 4)))
    _check(lambda ts: ad.tsum(ad.tmean(ts[0], axis=1) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ad.tsum(ts[0], axis=(0, 2)) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ad.reshape(ts[0], (6, 4)) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ad.transpose(ts[0], (2, 0, 1)) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ts[0][:, 1:, ::2] ** 2.0), [a])


def test_concat_gradient():
    rng = np.random.default_rng(3)
    a = t64(rng.normal(size=(2, 3)))
    b = t64(rng.normal(size=(2, 2)))
    _check(lambda ts: ad.tsum(ad.concat([ts[0], ts[1]], axis=1) ** 2.0), [a, b])


def test_matmul_gradient_and_shape_errors():
    rng = np.random.default_rng(4)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    _check(lambda ts: ad.tsum(ad.matmul(ts[0], ts[1]) ** 2.0), [a, b])
    with pytest.raises(ShapeError):
        ad.matmul(a, t64(rng.normal(size=(3, 2))))


def test_softmax_family_gradients():
    rng = np.random.default_rng(5)
    a = t64(rng.normal(size=(4, 5)))
    _check(lambda ts: ad.tsum(ad.softmax(ts[0], axis=1) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ad.log_softmax(ts[0], axis=0) * 0.1), [a])
    _check(lambda ts: ad.tsum(ad.l2_normalize(ts[0], axis=1) ** 2.0), [a])
    out = ad.softmax(a, axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0)


def test_indexed_op_gradients():
    rng = np.random.default_rng(6)
    a = t64(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    _check(lambda ts: ad.tsum(ad.gather_rows(ts[0], idx) ** 2.0), [a])
    _check(lambda ts: ad.tsum(ad.gather_cols(ts[0], np.array([0, 1, 1])) ** 2.0), [a])
    _check(lambda ts: ad.tsum(
        ad.scatter_add_rows(ad.gather_rows(ts[0], idx), np.array([0, 0, 1, 2]), 3) ** 2.0), [a])
    _check(lambda ts: ad.tsum(
        ad.segment_mean_rows(ts[0], np.array([0, 0, 1, 1, 1]), 3) ** 2.0), [a])
    _check(lambda ts: ad.tsum(
        ad.select_per_column(ts[0], np.array([4, 0, 2])) ** 2.0), [a])


def test_conv2d_gradient_kernel3_and_1():
    rng = np.random.default_rng(7)
    x = t64(rng.normal(size=(2, 3, 4, 5)))
    w3 = t64(rng.normal(size=(2, 3, 3, 3)) * 0.4)
    w1 = t64(rng.normal(size=(2, 3, 1, 1)))
    b = t64(rng.normal(size=(2,)))
    _check(lambda ts: ad.tsum(ad.conv2d(ts[0], ts[1], ts[2]) ** 2.0), [x, w3, b])
    _check(lambda ts: ad.tsum(ad.conv2d(ts[0], ts[1]) ** 2.0), [x, w1])
    out = ad.conv2d(x, w3, b)
    assert out.shape == (2, 2, 4, 5)  # same padding preserves H, W


def test_conv2d_channel_mismatch():
    x = t64(np.zeros((1, 3, 4, 4)))
    w = t64(np.zeros((2, 4, 3, 3)))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w)


def test_pool_and_upsample_gradients():
    rng = np.random.default_rng(8)
    x = t64(rng.normal(size=(1, 2, 4, 6)))
    _check(lambda ts: ad.tsum(ad.avg_pool2d(ts[0], 2) ** 2.0), [x])
    _check(lambda ts: ad.tsum(ad.upsample_bilinear2d(ts[0], 2) ** 2.0), [x])
    const = Tensor(np.full((1, 1, 3, 3), 2.5))
    up = ad.upsample_bilinear2d(const, 2)
    assert np.allclose(up.data, 2.5)  # interpolation is exact on constants


def test_no_nan_on_valid_forward():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 3)))
    chain = ad.softmax(ad.sigmoid(ad.matmul(x, x.T)), axis=1)
    assert np.isfinite(chain.data).all()


def test_backward_requires_scalar():
    x = t64(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_graph_pruned_at_frozen_inputs():
    a = Tensor(np.ones(3), requires_grad=False)
    out = ad.tsum(a * 2.0)
    assert not out.requires_grad and out._parents == ()
