import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kercnn import autodiff as ad
from kercnn import models
from kercnn.autodiff import Tensor
from kercnn.lateral import LateralKernel, identity_kernel
from kercnn.models import (
    ModelConfig,
    ModelState,
    cnn_forward,
    count_parameters,
    forward,
    kercnn_forward,
    layer_shapes,
    load_checkpoint,
    lrn,
    mnist_cnn,
    mnist_kercnn,
    mnist_reccnn,
    parameter_shapes,
    predict,
    reccnn_forward,
    save_checkpoint,
)
from kercnn.train import init_state


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(7).normal(size=(6, 28, 28, 1))


def zero_state(config):
    return ModelState({k: Tensor(np.zeros(s), requires_grad=True) for k, s in parameter_shapes(config).items()})


# --------------------------------------------------------- architecture


def test_mnist_parameter_count_is_7482():
    assert count_parameters(mnist_cnn()) == 7482
    assert count_parameters(mnist_kercnn(3, 2)) == 7482
    assert count_parameters(init_state(mnist_cnn(), 0)) == 7482


def test_mnist_shape_pipeline():
    assert layer_shapes(mnist_cnn()) == [(28, 28, 1), (24, 24, 16), (12, 12, 16), (8, 8, 16), (2, 2, 16)]
    assert parameter_shapes(mnist_cnn())["dense.w"] == (64, 10)


def test_same_padding_alternative_does_not_reach_7482():
    # the other natural reading of the architecture, recorded as rejected
    cfg = ModelConfig(padding="same", pools=(2, 2), pool_ceil=True)
    assert layer_shapes(cfg)[-1] == (7, 7, 16)
    assert count_parameters(cfg) == 16 * 26 + 16 * 401 + 784 * 10 + 10 != 7482


def test_reccnn_is_parameter_matched():
    cfg = mnist_reccnn(3, layer=0)
    shapes = parameter_shapes(cfg)
    assert shapes["rec1.w"] == (4, 4, 16, 16)
    assert shapes["conv2.w"] == (3, 3, 16, 16)
    assert count_parameters(cfg) == 7482


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(variant="mlp")
    with pytest.raises(ValueError):
        mnist_kercnn(0, 1)
    with pytest.raises(ValueError):
        ModelConfig(pools=(2,))
    cfg = mnist_kercnn(3, 2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.tag() == "kercnn-3-2" and mnist_cnn().tag() == "cnn"


# ------------------------------------------------------------- forwards


def test_cnn_logits_shape(images):
    state = init_state(mnist_cnn(), 0)
    assert cnn_forward(state, mnist_cnn(), images[0]).shape == (10,)
    assert cnn_forward(state, mnist_cnn(), images).shape == (6, 10)


def test_zero_model_gives_uniform_prediction(images):
    cfg = mnist_cnn()
    logits = cnn_forward(zero_state(cfg), cfg, images[0]).data
    assert not np.any(logits)
    cls, probs = predict(zero_state(cfg), cfg, images[0])
    assert cls == 0
    np.testing.assert_allclose(probs, 0.1)


def test_wrong_input_shape_raises():
    cfg = mnist_cnn()
    with pytest.raises(ValueError):
        forward(init_state(cfg, 0), cfg, np.zeros((27, 28, 1)))


def test_kercnn_one_one_is_bit_identical(images):
    state = init_state(mnist_cnn(), 3)
    a = cnn_forward(state, mnist_cnn(), images).data
    b = kercnn_forward(state, mnist_kercnn(1, 1), images).data
    assert a.tobytes() == b.tobytes()


def test_identity_kernel_makes_any_t_equal_cnn(images, monkeypatch):
    def fake(filters, source_layer=None, detach=False):
        n = filters.shape[2]
        return LateralKernel(Tensor(identity_kernel(filters.shape[0], n)), True, source_layer)

    monkeypatch.setattr(models, "lateral_kernel", fake)
    state = init_state(mnist_cnn(), 1)
    ref = cnn_forward(state, mnist_cnn(), images).data
    for t in ((2, 1), (3, 4)):
        np.testing.assert_allclose(kercnn_forward(state, mnist_kercnn(*t), images).data, ref, atol=1e-12)


def test_lateral_iterations_change_logits(images):
    state = init_state(mnist_cnn(), 1)
    a = forward(state, mnist_kercnn(1, 1), images).data
    b = forward(state, mnist_kercnn(3, 2), images).data
    assert not np.allclose(a, b)


def test_dropout_only_in_training(images):
    cfg = mnist_kercnn(2, 1)
    state = init_state(cfg, 0)
    eval_a = forward(state, cfg, images).data
    eval_b = forward(state, cfg, images, rng=np.random.default_rng(1)).data
    assert eval_a.tobytes() == eval_b.tobytes()
    train_a = forward(state, cfg, images, train=True, rng=np.random.default_rng(1)).data
    train_b = forward(state, cfg, images, train=True, rng=np.random.default_rng(1)).data
    assert train_a.tobytes() == train_b.tobytes()
    assert not np.allclose(train_a, eval_a)
    with pytest.raises(ValueError):
        forward(state, cfg, images, train=True)


def test_reccnn_single_step_is_feedforward(images):
    # LRN still runs at T=1; with alpha=0 it is the identity
    cfg = mnist_reccnn(1, lrn_alpha=0.0)
    state = init_state(cfg, 0)
    plain = ModelConfig.from_dict({**cfg.to_dict(), "variant": "cnn"})
    np.testing.assert_array_equal(reccnn_forward(state, cfg, images).data, cnn_forward(state, plain, images).data)
    before = reccnn_forward(state, mnist_reccnn(1), images).data
    state.params["rec1.w"] = Tensor(np.ones((4, 4, 16, 16)))
    assert reccnn_forward(state, mnist_reccnn(1), images).data.tobytes() == before.tobytes()


def test_reccnn_zero_lateral_weights_freeze_logits(images):
    state = init_state(mnist_reccnn(1), 0)
    state.params["rec1.w"] = Tensor(np.zeros((4, 4, 16, 16)), requires_grad=True)
    ref = reccnn_forward(state, mnist_reccnn(1), images).data
    for t in (2, 4):
        np.testing.assert_allclose(reccnn_forward(state, mnist_reccnn(t), images).data, ref, atol=1e-12)


def test_reccnn_time_matters(images):
    state = init_state(mnist_reccnn(1, layer=1), 0)
    a = reccnn_forward(state, mnist_reccnn(1, layer=1), images).data
    b = reccnn_forward(state, mnist_reccnn(3, layer=1), images).data
    assert not np.allclose(a, b)


# ------------------------------------------------------------------ LRN


def test_lrn_identity_and_constant():
    h = np.random.default_rng(0).normal(size=(3, 3, 5))
    np.testing.assert_array_equal(lrn(h, alpha=0.0, k=1.0).data, h)
    const = np.full((2, 2, 4), 3.0)
    out = lrn(const, radius=5, alpha=0.1, beta=0.5, k=1.0).data
    np.testing.assert_allclose(out, 3.0 / np.sqrt(1.0 + 0.1 * 4 * 9.0))


def test_lrn_hand_case():
    h = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3)
    a, b, k = 0.5, 0.75, 2.0
    expected = [1 / (k + a * 5) ** b, 2 / (k + a * 14) ** b, 3 / (k + a * 13) ** b]
    np.testing.assert_allclose(lrn(h, 1, a, b, k).data.ravel(), expected, rtol=1e-14)


def test_lrn_gradient(rng):
    assert ad.finite_diff_check(lambda t: ad.tsum(lrn(t, 1, 0.3, 0.75, 1.0) ** 2), rng.normal(size=(2, 2, 4))) < 1e-4


# ------------------------------------------------------------ gradients


def tiny_kercnn():
    # 7x7 inputs, two 2x2 conv layers of 3 and 2 filters, 2 classes
    return ModelConfig(
        variant="kercnn", layers=((2, 3), (2, 2)), stopping_times=(3, 3), class_count=2,
        input_shape=(7, 7, 1), pools=(2, 1), recurrent_dropout=0.0,
    )


def test_tiny_kercnn_is_small():
    assert count_parameters(tiny_kercnn()) <= 200


def test_fd_through_tiny_kercnn(rng):
    cfg = tiny_kercnn()
    state = init_state(cfg, 5, np.float64)
    x = Tensor(rng.normal(size=(2, 7, 7, 1)))
    labels = np.array([0, 1])
    for name in state.names():
        def f(p, name=name):
            params = dict(state.params)
            params[name] = p
            return ad.cross_entropy(kercnn_forward(ModelState(params), cfg, x), labels)

        assert ad.finite_diff_check(f, state[name].data) < 1e-4, name


def test_fd_input_gradient_through_kercnn(rng):
    cfg = tiny_kercnn()
    state = init_state(cfg, 2, np.float64)
    err = ad.finite_diff_check(lambda t: ad.cross_entropy(kercnn_forward(state, cfg, t), 1), rng.normal(size=(7, 7, 1)))
    assert err < 1e-4


def test_detach_kernel_changes_filter_gradient(rng):
    cfg = tiny_kercnn()
    detached = ModelConfig.from_dict({**cfg.to_dict(), "detach_kernel": True})
    state = init_state(cfg, 1, np.float64)
    x = Tensor(rng.normal(size=(2, 7, 7, 1)))
    g1 = ad.grad(ad.cross_entropy(forward(state, cfg, x), [0, 1]), [state["conv1.w"]])[0]
    g2 = ad.grad(ad.cross_entropy(forward(state, detached, x), [0, 1]), [state["conv1.w"]])[0]
    np.testing.assert_array_equal(forward(state, cfg, x).data, forward(state, detached, x).data)
    assert not np.allclose(g1, g2)


# ----------------------------------------------------------- checkpoints


@given(st.sampled_from(["cnn", "kercnn", "reccnn"]), st.integers(0, 1000))
def test_checkpoint_round_trip(tmp_path_factory, variant, seed):
    cfg = {"cnn": mnist_cnn(), "kercnn": mnist_kercnn(2, 3), "reccnn": mnist_reccnn(2, 1)}[variant]
    state = init_state(cfg, seed)
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    save_checkpoint(path, state, cfg, {"note": "x", "seed": seed})
    back, cfg2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"note": "x", "seed": seed}
    assert back.names() == state.names()
    for a, b in zip(back.tensors(), state.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert "parameters:" in path.with_name("m.ckpt.txt").read_text()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_state(mnist_cnn(), 0), mnist_cnn())
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "cut").write_bytes(raw[:-100])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "cut")
