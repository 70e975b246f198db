import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kercnn import autodiff as ad
from kercnn.autodiff import NonFiniteError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def direct_conv(x, w, pad):
    """Nested-loop cross-correlation oracle, single image."""
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    d = w.shape[0]
    ho, wo = xp.shape[0] - d + 1, xp.shape[1] - d + 1
    out = np.zeros((ho, wo, w.shape[2]))
    for i in range(ho):
        for j in range(wo):
            for k in range(w.shape[2]):
                out[i, j, k] = np.sum(xp[i:i + d, j:j + d, :] * w[:, :, k, :])
    return out


# --------------------------------------------------------------- conv2d


def test_conv_mnist_first_layer_shape():
    x = Tensor(np.zeros((28, 28, 1)))
    w = Tensor(np.zeros((5, 5, 16, 1)))
    assert ad.conv2d(x, w, padding=0).shape == (24, 24, 16)


def test_conv_scalar_identity():
    out = ad.conv2d(Tensor(np.full((1, 1, 1), 3.25)), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert out.data.item() == 3.25


def test_conv_all_ones_gives_fours():
    out = ad.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((2, 2, 1, 1))))
    np.testing.assert_array_equal(out.data, np.full((2, 2, 1), 4.0))


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(6, 7, 3))
    w = rng.normal(size=(3, 3, 4, 3))
    for pad in (0, 1, 2):
        got = ad.conv2d(Tensor(x), Tensor(w), padding=pad).data
        np.testing.assert_allclose(got, direct_conv(x, w, pad), atol=1e-12)


def test_conv_delta_filter_reproduces_input(rng):
    x = rng.normal(size=(2, 5, 5, 2))
    w = np.zeros((3, 3, 2, 2))
    w[1, 1] = np.eye(2)
    out = ad.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_padding_extents():
    out = ad.conv2d(Tensor(np.ones((5, 6, 1))), Tensor(np.ones((3, 3, 2, 1))), padding=(1, 0, 2, 1))
    assert out.shape == (5 + 1 - 2, 6 + 3 - 2, 2)


def test_conv_errors():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 1, 1))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), padding=-1)


# -------------------------------------------------------------- pooling


def test_maxpool_shapes_and_values():
    assert ad.maxpool2(Tensor(np.zeros((24, 24, 16)))).shape == (12, 12, 16)
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    assert ad.maxpool2(x).data.item() == 4.0
    assert ad.maxpool2(Tensor(np.zeros((5, 7, 1)))).shape == (3, 4, 1)
    assert ad.maxpool(Tensor(np.zeros((8, 8, 16))), 4, ceil_mode=False).shape == (2, 2, 16)


def test_maxpool_constant_and_ties():
    x = Tensor(np.full((4, 4, 2), 2.5), requires_grad=True)
    y = ad.maxpool2(x)
    np.testing.assert_array_equal(y.data, np.full((2, 2, 2), 2.5))
    (g,) = ad.grad(ad.tsum(y), [x])
    # every tie goes to the first cell of its window
    expected = np.zeros((4, 4, 2))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(g, expected)


def test_maxpool_ragged_border_gradient():
    x = Tensor(np.arange(9.0).reshape(3, 3, 1), requires_grad=True)
    y = ad.maxpool2(x)
    np.testing.assert_array_equal(y.data[..., 0], [[4.0, 5.0], [7.0, 8.0]])
    (g,) = ad.grad(ad.tsum(y), [x])
    assert g.sum() == 4.0 and g[1, 1, 0] == 1.0


# ------------------------------------------------------ elementwise ops


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_allclose(ad.softmax(Tensor(np.full(10, 3.0))).data, np.full(10, 0.1))


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), finite)
def test_softmax_normalized_and_shift_invariant(v, c):
    p = ad.softmax(Tensor(v)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6
    q = ad.softmax(Tensor(v + c)).data
    np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-12)


def test_dense_examples(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(ad.dense(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
    b = rng.normal(size=4)
    np.testing.assert_array_equal(ad.dense(Tensor(x), Tensor(np.zeros((5, 4))), Tensor(b)).data, np.tile(b, (3, 1)))
    with pytest.raises(ValueError):
        ad.dense(Tensor(x), Tensor(np.zeros((4, 4))), Tensor(b))


def test_flatten_is_row_major_hwc():
    x = np.arange(2 * 3 * 4 * 5.0).reshape(2, 3, 4, 5)
    np.testing.assert_array_equal(ad.flatten(Tensor(x)).data[1], x[1].ravel())


# ------------------------------------------------------------- backward


def test_sum_and_relu_gradients():
    x = Tensor(np.array([[-1.0, 2.0]]), requires_grad=True)
    (g,) = ad.grad(ad.tsum(x), [x])
    np.testing.assert_array_equal(g, np.ones((1, 2)))
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    (g,) = ad.grad(ad.tsum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x
    (g,) = ad.grad(ad.tsum(y), [x])
    np.testing.assert_allclose(g, 2 * x.data + 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert y._parents == () and not y.requires_grad


def test_rank_limit():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 8, 8, 1))
    w = rng.normal(size=(3, 3, 4, 1))
    a = ad.maxpool2(ad.relu(ad.conv2d(Tensor(x), Tensor(w)))).data
    b = ad.maxpool2(ad.relu(ad.conv2d(Tensor(x), Tensor(w)))).data
    assert a.tobytes() == b.tobytes()


def test_dtype_switch():
    with ad.default_dtype(np.float32):
        assert Tensor([1, 2]).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_dtype(np.int32)


# -------------------------------------------------- finite differences


def test_fd_squared_norm(rng):
    err = ad.finite_diff_check(lambda t: ad.tsum(t * t), rng.normal(size=(3, 4)))
    assert err < 1e-8


def test_fd_constant_function():
    assert ad.finite_diff_check(lambda t: ad.tsum(t * 0.0) + 1.0, np.ones(4)) == 0.0


def test_fd_conv_relu_sum(rng):
    w = Tensor(rng.normal(size=(3, 3, 2, 1)))
    err = ad.finite_diff_check(lambda t: ad.tsum(ad.relu(ad.conv2d(t, w, padding=1))), rng.normal(size=(4, 4, 1)))
    assert err < 1e-4


def test_fd_step_must_be_positive():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda t: ad.tsum(t), np.ones(2), step=0.0)


def _away_from_kinks(x, gap=1e-3):
    # keep central differences off the relu/max kinks
    return np.where(np.abs(x) < gap, gap * 10, x)


OPS = {
    "add": lambda t, c: ad.tsum(ad.add(t, c) * c),
    "sub": lambda t, c: ad.tsum(ad.sub(c, t) * c),
    "mul": lambda t, c: ad.tsum(ad.mul(t, t) * c),
    "div": lambda t, c: ad.tsum(ad.div(c, ad.exp(t))),
    "power": lambda t, c: ad.tsum(ad.power(ad.exp(t), 1.5)),
    "exp": lambda t, c: ad.tsum(ad.exp(t) * c),
    "log": lambda t, c: ad.tsum(ad.log(ad.exp(t) + 1.0)),
    "relu": lambda t, c: ad.tsum(ad.relu(t) * c),
    "sigmoid": lambda t, c: ad.tsum(ad.sigmoid(t) * c),
    "sum_axis": lambda t, c: ad.tsum(ad.tsum(t, axis=1) ** 2),
    "reshape": lambda t, c: ad.tsum(ad.reshape(t, (-1,)) * c.reshape(-1)),
    "softmax": lambda t, c: ad.tsum(ad.softmax(t) * c),
    "log_softmax": lambda t, c: ad.tsum(ad.log_softmax(t) * c),
    "cross_entropy": lambda t, c: ad.cross_entropy(t, np.array([1, 2, 0])),
    "matmul": lambda t, c: ad.tsum(ad.matmul(t, Tensor(c.data.T)) ** 2),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_fd_every_elementwise_op(name, rng):
    x = _away_from_kinks(rng.normal(size=(3, 4)))
    c = Tensor(rng.normal(size=(3, 4)))
    assert ad.finite_diff_check(lambda t: OPS[name](t, c), x) < 1e-4


def test_fd_conv_weights_bias_and_pool(rng):
    x = Tensor(rng.normal(size=(2, 7, 7, 2)))
    b = Tensor(rng.normal(size=3))
    f = lambda w: ad.tsum(ad.maxpool2(ad.relu(ad.conv2d(x, w, b, padding="same"))) ** 2)  # noqa: E731
    assert ad.finite_diff_check(f, rng.normal(size=(3, 3, 3, 2))) < 1e-4
    w = Tensor(rng.normal(size=(3, 3, 3, 2)))
    g = lambda bb: ad.tsum(ad.relu(ad.conv2d(x, w, bb)) ** 2)  # noqa: E731
    assert ad.finite_diff_check(g, rng.normal(size=3)) < 1e-4


def test_fd_maxpool_floor_mode(rng):
    x = rng.permutation(64).reshape(8, 8, 1).astype(float)
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.maxpool(t, 4, ceil_mode=False) ** 2), x, step=1e-3) < 1e-6


@given(arrays(np.float64, (2, 5), elements=st.floats(-20, 20)), st.integers(0, 4), st.integers(0, 4))
def test_cross_entropy_matches_direct_formula(logits, a, b):
    labels = np.array([a, b])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    direct = -np.mean(np.log(p[[0, 1], labels]))
    assert abs(ad.cross_entropy(Tensor(logits), labels).item() - direct) < 1e-9 * max(1.0, abs(direct))


def test_cross_entropy_examples():
    assert abs(ad.cross_entropy(Tensor(np.zeros(10)), 3).item() - np.log(10)) < 1e-12
    losses = [ad.cross_entropy(Tensor(np.array([0.0, z, 0.0])), 1).item() for z in (1.0, 10.0, 100.0)]
    assert losses[0] > losses[1] > losses[2] >= 0.0 and losses[2] < 1e-40
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros(4)), 4)
