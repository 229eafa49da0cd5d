import math

import numpy as np
import pytest

from sgmquant.engine import (
    Conv2d,
    EngineError,
    Flatten,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    backward,
    conv2d_forward,
    lenet5,
    linear_forward,
    loss_and_grads,
    maxpool_forward,
    mlp,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from oracles import five_point_difference, rel_err

GRAD_TOL = 1e-5
# Denominator floor for the relative error. Difference-quotient rounding noise is
# about eps*|loss|/h ~ 1e-12, so gradients below ~1e-6 (dead units) are compared
# absolutely at GRAD_TOL * GRAD_FLOOR = 1e-11.
GRAD_FLOOR = 1e-6


def test_linear_examples():
    x = np.array([[1.0, 2.0]])
    assert linear_forward(x, np.array([[1.0, 1.0]]), np.array([0.5])).tolist() == [[3.5]]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(linear_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(linear_forward(np.zeros((3, 4)), rng.normal(size=(2, 4)), b), np.tile(b, (3, 1)))
    with pytest.raises(EngineError):
        linear_forward(np.zeros((1, 3)), np.zeros((2, 4)), None)


def test_conv_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 1, 5, 5))
    np.testing.assert_array_equal(conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1)).tolist() == [[[[10.0]]]]
    x = rng.normal(size=(2, 3, 6, 6))
    out = conv2d_forward(x, np.zeros((4, 3, 3, 3)), np.arange(4.0), stride=1, padding=1)
    assert out.shape == (2, 4, 6, 6)
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(4.0)[None, :, None, None], out.shape))
    assert conv2d_forward(rng.normal(size=(1, 1, 7, 7)), np.ones((1, 1, 3, 3)), None, stride=2).shape == (1, 1, 3, 3)
    with pytest.raises(EngineError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)), None)


def brute_force_conv(x, K, b, stride, pad):
    B, C, H, W = x.shape
    F, _, kh, kw = K.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, f, i, j] = np.sum(patch * K[f]) + b[f]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2)])
def test_conv_matches_loops(stride, pad):
    rng = np.random.default_rng(2)
    x, K, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
    np.testing.assert_allclose(conv2d_forward(x, K, b, stride, pad), brute_force_conv(x, K, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_maxpool_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, arg = maxpool_forward(x, 2)
    assert y.tolist() == [[[[4.0]]]] and arg.tolist() == [[[[3]]]]
    c = np.full((1, 2, 4, 4), 7.0)
    y, arg = maxpool_forward(c, 2)
    assert np.all(y == 7.0)
    assert np.all(arg == 0)  # ties resolve to the first index in scan order
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(maxpool_forward(x, 1)[0], x)


def test_relu_examples():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert np.all(relu(-np.ones(4)) == 0)
    x = np.random.default_rng(0).normal(size=10)
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_softmax_cross_entropy_examples():
    loss, grad = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(math.log(7))
    loss, grad = softmax_cross_entropy(np.array([[10.0, -10.0]]), np.array([0]))
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    rng = np.random.default_rng(0)
    _, grad = softmax_cross_entropy(rng.normal(size=(5, 4)), rng.integers(0, 4, 5))
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    with pytest.raises(EngineError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def check_network_gradients(net, x, y, params, h=1e-4):
    """Compare analytic gradients with central differences at the given (layer_index, kind, flat_index)."""
    _, grads = loss_and_grads(net, x, y)
    worst = 0.0
    for li, which, idx in params:
        layer = net.param_layers[li]
        arr = layer.weight if which == 0 else layer.bias
        index = np.unravel_index(idx, arr.shape)
        num = five_point_difference(lambda: loss_and_grads(net, x, y)[0], arr, index, h)
        ana = grads[li][which][index]
        worst = max(worst, rel_err(ana, num, GRAD_FLOOR))
    return worst


def all_params(net):
    return [(li, w, i) for li, l in enumerate(net.param_layers) for w, arr in enumerate((l.weight, l.bias))
            for i in range(arr.size)]


def test_mlp_gradients_match_finite_differences():
    net = mlp([6, 5, 4, 3], seed=3)
    rng = np.random.default_rng(4)
    for l in net.param_layers:
        l.bias[...] = rng.normal(scale=0.1, size=l.bias.shape)
    x, y = rng.normal(size=(5, 6)), rng.integers(0, 3, 5)
    assert check_network_gradients(net, x, y, all_params(net)) < GRAD_TOL


def small_cnn(seed, stride=1, pad=0, pool_stride=2):
    # weight scales keep the logits O(1) so no gradient entry is swamped by rounding noise
    rng = np.random.default_rng(seed)
    return Network([
        Conv2d("c1", rng.normal(scale=0.5, size=(3, 2, 3, 3)), rng.normal(scale=0.1, size=3), 1, stride, pad),
        MaxPool2d("p1", 2, pool_stride),
        ReLU("r1"),
        Flatten("f"),
        Linear("fc", rng.normal(scale=0.1, size=(4, 3 * 4 * 4 if pool_stride == 2 else 3 * 5 * 5)),
               rng.normal(scale=0.1, size=4), 2),
    ])


@pytest.mark.parametrize("stride,pad,pool_stride", [(1, 0, 2), (1, 1, 1)])
def test_cnn_gradients_match_finite_differences(stride, pad, pool_stride):
    net = small_cnn(5, stride, pad, pool_stride)
    rng = np.random.default_rng(6)
    size = 10 if pad == 0 else 6
    x = rng.normal(size=(3, 2, size, size))
    y = rng.integers(0, 4, 3)
    assert check_network_gradients(net, x, y, all_params(net)) < GRAD_TOL


def test_lenet_sampled_gradients():
    net = lenet5(seed=0)
    rng = np.random.default_rng(7)
    for l in net.param_layers:
        l.bias[...] = rng.normal(scale=0.05, size=l.bias.shape)
    x, y = rng.random((2, 1, 28, 28)), rng.integers(0, 10, 2)
    params = all_params(net)
    pick = [params[i] for i in rng.choice(len(params), 50, replace=False)]
    assert check_network_gradients(net, x, y, pick) < GRAD_TOL


def test_saturated_batch_has_tiny_gradients():
    net = Network([Linear("fc", np.eye(3) * 50.0, np.zeros(3), 1)])
    x = np.eye(3)
    loss, grads = backward(net, x, np.arange(3))
    assert loss < 1e-20
    assert np.abs(grads[0][0]).max() < 1e-20


def test_forward_does_not_mutate_inputs():
    net = lenet5(seed=1)
    x = np.random.default_rng(0).random((2, 1, 28, 28))
    x0 = x.copy()
    w0 = [w.copy() for w in net.weights()]
    loss_and_grads(net, x, np.array([1, 2]))
    np.testing.assert_array_equal(x, x0)
    for a, b in zip(w0, net.weights()):
        np.testing.assert_array_equal(a, b)


def test_sgd_step_examples():
    net = Network([Linear("fc", np.array([[1.0]]), np.array([0.0]), 1)])
    g = [(np.array([[0.5]]), np.array([0.0]))]
    sgd_step(net, g, [np.array([[0.3]])], 0.1)
    assert net.param_layers[0].weight[0, 0] == pytest.approx(0.92, abs=1e-15)
    before = net.param_layers[0].weight.copy()
    sgd_step(net, g, [np.array([[0.3]])], 0.0)
    np.testing.assert_array_equal(net.param_layers[0].weight, before)
    sgd_step(net, [(np.zeros((1, 1)), np.zeros(1))], [np.zeros((1, 1))], 0.5)
    np.testing.assert_array_equal(net.param_layers[0].weight, before)
    with pytest.raises(EngineError):
        sgd_step(net, [(np.zeros((2, 1)), np.zeros(1))], None, 0.1)
    with pytest.raises(EngineError):
        sgd_step(net, [(np.full((1, 1), np.nan), np.zeros(1))], None, 0.1)


def test_zero_regularizer_is_bit_neutral():
    rng = np.random.default_rng(0)
    a, b = mlp([4, 3, 2], seed=1), mlp([4, 3, 2], seed=1)
    for _ in range(5):
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 2, 6)
        _, ga = loss_and_grads(a, x, y)
        _, gb = loss_and_grads(b, x, y)
        sgd_step(a, ga, None, 0.1)
        sgd_step(b, gb, [-0.0 * w for w in b.weights()], 0.1)
    for wa, wb in zip(a.weights(), b.weights()):
        assert wa.tobytes() == wb.tobytes()


def test_determinism():
    def run():
        net = lenet5(seed=3)
        rng = np.random.default_rng(9)
        for _ in range(3):
            _, g = loss_and_grads(net, rng.random((4, 1, 28, 28)), rng.integers(0, 10, 4))
            sgd_step(net, g, None, 0.05)
        return b"".join(w.tobytes() for w in net.weights())
    assert run() == run()


def test_float32_fast_path_close_to_reference():
    rng = np.random.default_rng(11)
    x, y = rng.random((3, 1, 28, 28)), rng.integers(0, 10, 3)
    ref = lenet5(seed=2)
    fast = lenet5(seed=2, dtype=np.float32)
    for a, b in zip(ref.param_layers, fast.param_layers):
        a.weight[...] = b.weight
    l64, g64 = loss_and_grads(ref, x, y)
    l32, g32 = loss_and_grads(fast, x, y)
    assert g32[0][0].dtype == np.float32
    assert rel_err(l64, l32) < 1e-3
    for (a, _), (b, _) in zip(g64, g32):
        assert np.abs(a - b).max() <= 1e-3 * max(np.abs(a).max(), 1e-12)


def test_architecture_round_trip():
    net = lenet5(seed=0)
    clone = Network.from_architecture(net.architecture())
    assert clone.architecture() == net.architecture()
    assert [l.layer_id for l in clone.param_layers] == [1, 2, 3, 4]
    assert sum(w.size for w in net.weights()) == 500 + 25000 + 400000 + 5000
