import numpy as np
import pytest
from hypothesis import given, strategies as st

from cxrtriage import tensor as T
from oracles import conv2d_naive, depthwise_naive


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 2, 0), (5, 1, 2)])
def test_conv2d_matches_loops(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d_forward(x, w, b, stride, pad), conv2d_naive(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (5, 2, 2), (3, 1, 0)])
def test_depthwise_matches_loops(rng, k, stride, pad):
    x = rng.standard_normal((2, 5, 9, 8))
    w = rng.standard_normal((5, 1, k, k))
    got = T.depthwise_conv2d_forward(x, w, None, stride, pad)
    np.testing.assert_allclose(got, depthwise_naive(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)), None)
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((1, 3, 2, 2)), np.zeros((2, 3, 5, 5)), None)
    with pytest.raises(T.ShapeError):
        T.Dense(4, 2).forward(np.zeros((3, 5)))


def test_conv_output_size():
    assert T.conv_output_size(224, 3, 2, 1) == 112
    assert T.conv_output_size(14, 3, 1, 0) == 12


def test_backward_before_forward_is_state_error():
    with pytest.raises(T.StateError):
        T.ReLU().backward(np.ones((1, 2)), T.Tape())


def test_non_finite_input_rejected():
    with pytest.raises(T.NumericError):
        T.ReLU().forward(np.array([[np.nan, 1.0]]))


def test_softmax_rows_sum_to_one(rng):
    z = rng.standard_normal((5, 3)) * 50
    np.testing.assert_allclose(T.softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_extremes():
    s = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0


def _net(layers):
    net = T.Sequential(layers)
    net.init_params(np.random.default_rng(0))
    return net


LAYER_CASES = {
    "conv2d": ([("c", T.Conv2D(2, 3, 3, 2, 1))], (2, 2, 6, 6)),
    "conv2d_1x1": ([("c", T.Conv2D(3, 2, 1, use_bias=False))], (2, 3, 4, 4)),
    "depthwise": ([("d", T.DepthwiseConv2D(3, 3, 2, 1))], (2, 3, 7, 7)),
    "dense": ([("d", T.Dense(5, 3))], (4, 5)),
    "batchnorm": ([("c", T.Conv2D(2, 3, 1, use_bias=False)), ("bn", T.BatchNorm(3))], (3, 2, 3, 3)),
    "relu": ([("d", T.Dense(4, 6)), ("a", T.ReLU())], (3, 4)),
    "swish": ([("d", T.Dense(4, 6)), ("a", T.Swish())], (3, 4)),
    "sigmoid": ([("d", T.Dense(4, 3)), ("a", T.Sigmoid())], (3, 4)),
    "softmax": ([("d", T.Dense(4, 3)), ("a", T.Softmax())], (3, 4)),
    "gap": ([("c", T.Conv2D(2, 3, 3, 1, 1)), ("g", T.GlobalAveragePool())], (2, 2, 4, 4)),
    "zeropad": ([("p", T.ZeroPadding2D(1)), ("c", T.Conv2D(2, 2, 3))], (2, 2, 3, 3)),
    "flatten": ([("c", T.Conv2D(2, 2, 1)), ("f", T.Flatten()), ("d", T.Dense(18, 2))], (2, 2, 3, 3)),
    "mbconv_residual": ([("m", T.MBConv(3, 3, 4, 3, 1))], (2, 3, 5, 5)),
    "mbconv_stride": ([("m", T.MBConv(3, 4, 2, 3, 2))], (2, 3, 6, 6)),
}


@pytest.mark.parametrize("train", [False, True], ids=["eval", "train"])
@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_grad_check_layers(case, train):
    layers, shape = LAYER_CASES[case]
    net = _net(layers)
    x = np.random.default_rng(3).standard_normal(shape)
    report = T.grad_check(net, x, n_probes=60, seed=5, train=train)
    assert report.ok(1e-4), report.per_layer


def test_grad_check_dropout_train_mode():
    net = _net([("d", T.Dense(6, 8)), ("drop", T.Dropout(0.5)), ("o", T.Dense(8, 2))])
    report = T.grad_check(net, np.random.default_rng(0).standard_normal((4, 6)), n_probes=60, train=True)
    assert report.ok(1e-4)


def test_dropout_identity_at_inference(rng):
    x = rng.standard_normal((3, 10))
    assert np.array_equal(T.Dropout(0.3).forward(x, T.Tape(train=False)), x)
    assert np.array_equal(T.Dropout(0.3).forward(x), x)


def test_dropout_inverted_scaling():
    x = np.ones((200, 500))
    y = T.Dropout(0.3).forward(x, T.Tape(train=True, rng=np.random.default_rng(0)))
    kept = y[y > 0]
    np.testing.assert_allclose(kept, 1 / 0.7, rtol=1e-6)
    assert abs(y.mean() - 1.0) < 0.01


def test_batchnorm_running_update():
    bn = T.BatchNorm(2, momentum=0.9)
    x = np.stack([np.full((3, 3), 2.0), np.full((3, 3), -1.0)])[None].repeat(4, axis=0)
    bn.forward(x, T.Tape(train=True))
    np.testing.assert_allclose(bn.params["running_mean"], [0.2, -0.1])
    np.testing.assert_allclose(bn.params["running_var"], [0.9, 0.9])


def test_frozen_batchnorm_uses_running_stats_and_keeps_them(rng):
    bn = T.BatchNorm(3)
    bn.params["running_mean"] = np.array([1.0, 2.0, 3.0])
    bn.params["running_var"] = np.array([4.0, 1.0, 0.25])
    bn.trainable = False
    x = rng.standard_normal((2, 3, 4, 4))
    before = {k: v.copy() for k, v in bn.params.items()}
    out = bn.forward(x, T.Tape(train=True))
    ref = (x - before["running_mean"].reshape(1, 3, 1, 1)) / np.sqrt(before["running_var"] + T.BN_EPS).reshape(1, 3, 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    for k in before:
        assert np.array_equal(before[k], bn.params[k])


def test_frozen_layers_produce_no_param_grads(rng):
    net = _net([("a", T.Dense(3, 4)), ("b", T.Dense(4, 2))])
    net["a"].trainable = False
    tape = T.Tape(train=True)
    out = net.forward(rng.standard_normal((2, 3)), tape)
    _, grads = T.backward(net, tape, np.ones_like(out))
    assert set(grads) == {"b.weights", "b.bias"}


def test_sequential_skips_frozen_prefix_when_input_grad_unneeded(rng):
    net = _net([("a", T.Dense(3, 4)), ("r", T.ReLU()), ("b", T.Dense(4, 2))])
    net["a"].trainable = False
    tape = T.Tape(train=True)
    out = net.forward(rng.standard_normal((2, 3)), tape)
    assert net.backward(np.ones_like(out), tape, need_input_grad=False) is None
    assert "b.weights" in T.gradients(net, tape)


def test_mbconv_residual_rule():
    assert T.MBConv(16, 16, 4, 3, 1).residual
    assert not T.MBConv(16, 16, 4, 3, 2).residual
    assert not T.MBConv(16, 24, 4, 3, 1).residual


def test_state_dict_roundtrip(rng):
    a = _net([("c", T.Conv2D(2, 3, 3)), ("bn", T.BatchNorm(3))])
    b = T.Sequential([("c", T.Conv2D(2, 3, 3)), ("bn", T.BatchNorm(3))])
    T.load_state_dict(b, T.state_dict(a))
    x = rng.standard_normal((1, 2, 5, 5))
    assert np.array_equal(a.forward(x), b.forward(x))


def test_layer_config_roundtrip():
    net = _net([("m", T.MBConv(3, 4, 2, 3, 2)), ("f", T.Flatten())])
    clone = T.layer_from_config(net.config())
    assert clone.config() == net.config()


@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 8), st.sampled_from([1, 2]))
def test_depthwise_backward_is_adjoint(n, c, size, stride):
    """<dw(x), g> == <x, dw^T(g)>: the input gradient is the exact adjoint of the forward map."""
    rng = np.random.default_rng(n * 100 + c * 10 + size)
    layer = T.DepthwiseConv2D(c, 3, stride, 1, use_bias=False)
    layer.init_params(rng)
    x = rng.standard_normal((n, c, size, size))
    tape = T.Tape()
    y = layer.forward(x, tape)
    g = rng.standard_normal(y.shape)
    dx = layer.backward(g, tape)
    assert np.isclose(np.sum(y * g), np.sum(x * dx), rtol=1e-10, atol=1e-10)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 4), st.integers(3, 7), st.sampled_from([1, 2]),
       st.integers(0, 1))
def test_conv_backward_is_adjoint(n, c, f, size, stride, pad):
    rng = np.random.default_rng(n + 7 * c + 31 * f + size)
    layer = T.Conv2D(c, f, 3, stride, pad, use_bias=False)
    layer.init_params(rng)
    x = rng.standard_normal((n, c, size, size))
    tape = T.Tape()
    y = layer.forward(x, tape)
    g = rng.standard_normal(y.shape)
    dx = layer.backward(g, tape)
    assert np.isclose(np.sum(y * g), np.sum(x * dx), rtol=1e-10, atol=1e-10)
