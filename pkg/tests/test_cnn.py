import numpy as np
import pytest

from palletrack.cnn import (
    Conv,
    Dense,
    MaxPool,
    Network,
    Relu,
    ShapeError,
    Softmax,
    backward,
    forward,
    forward_batch,
    loss_and_gradients,
)


def naive_conv(x, w, b, stride, padding):
    """Direct quadruple-loop convolution oracle."""
    n, h, wd, c = x.shape
    k = w.shape[0]
    f = w.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, oh, ow, f))
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                patch = xp[ni, oi * stride:oi * stride + k,
                           oj * stride:oj * stride + k, :]
                out[ni, oi, oj] = b + np.tensordot(patch, w, axes=3)
    return out


def conv_net(in_shape, conv):
    return Network(in_shape, [conv, Dense(2), Softmax()])


class TestForward:
    def test_zero_parameters_give_uniform_probabilities(self):
        net = Network((4, 4, 1), [Conv(3, 3, 1, 1), Relu(), Dense(2),
                                  Softmax()]).zero_parameters()
        probs = forward(net, np.random.default_rng(0).random((4, 4, 1)))
        assert probs == pytest.approx([0.5, 0.5])

    def test_relu_clamps_negative(self):
        net = Network((1, 1, 2), [Relu(), Dense(2), Softmax()])
        net.init_parameters(1)
        net.params[1]["w"][:] = np.eye(2)
        net.params[1]["b"][:] = 0.0
        probs = forward(net, np.array([[[-1.0, 1.0]]]))
        # relu turns -1 into 0, so logits are (0, 1)
        expected = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()
        assert probs == pytest.approx(expected)

    def test_pool_3x3_stride1_on_32(self):
        spec = MaxPool(3, 1)
        assert spec.output_shape((32, 32, 40)) == (30, 30, 40)

    def test_conv_shape_algebra(self):
        assert Conv(40, 3, 1, 1).output_shape((32, 32, 1)) == (32, 32, 40)
        assert Conv(25, 20, 1, 1).output_shape((250, 250, 1)) == (233, 233, 25)
        assert MaxPool(5, 2).output_shape((233, 233, 25)) == (115, 115, 25)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(5)
        net = Network((6, 6, 2), [Conv(4, 3), Relu(), Dense(3), Softmax()])
        net.init_parameters(3)
        probs = forward_batch(net, rng.random((8, 6, 6, 2)))
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
        assert (probs >= 0).all()

    def test_shape_mismatch_rejected(self):
        net = Network((6, 6, 1), [Dense(2), Softmax()]).init_parameters(0)
        with pytest.raises(ShapeError, match="6, 6, 1"):
            forward(net, np.zeros((5, 5, 1)))

    def test_uninitialized_network_rejected(self):
        net = Network((2, 2, 1), [Dense(2), Softmax()])
        with pytest.raises(RuntimeError, match="uninitialized"):
            forward(net, np.zeros((2, 2, 1)))

    def test_deterministic(self):
        net = Network((8, 8, 1), [Conv(6, 3, 1, 1), Relu(), MaxPool(2, 2),
                                  Dense(2), Softmax()]).init_parameters(7)
        x = np.random.default_rng(2).random((3, 8, 8, 1))
        assert np.array_equal(forward_batch(net, x), forward_batch(net, x))

    def test_softmax_only_terminal(self):
        with pytest.raises(ValueError):
            Network((2, 2, 1), [Softmax(), Dense(2), Softmax()])
        with pytest.raises(ValueError):
            Network((2, 2, 1), [Dense(2), Relu()])


class TestConvStrategies:
    """The sparsity-aware paths must agree exactly with the naive oracle."""

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_dense_input(self, stride, padding):
        rng = np.random.default_rng(10 + stride + padding)
        x = rng.standard_normal((3, 9, 11, 2))
        net = conv_net((9, 11, 2), Conv(4, 3, stride, padding))
        net.init_parameters(1)
        w, b = net.params[0]["w"], net.params[0]["b"]
        from palletrack.cnn import _conv_forward
        out, _ = _conv_forward(net.layers[0], net.params[0], x)
        assert np.allclose(out, naive_conv(x, w, b, stride, padding),
                           atol=1e-12)

    @pytest.mark.parametrize("density", [0.0, 0.005, 0.05, 0.3])
    def test_sparse_inputs_all_paths(self, density):
        rng = np.random.default_rng(int(density * 1000))
        x = (rng.random((4, 16, 16, 1)) < density).astype(float)
        net = conv_net((16, 16, 1), Conv(5, 3, 1, 1))
        net.init_parameters(2)
        w, b = net.params[0]["w"], net.params[0]["b"]
        from palletrack.cnn import _conv_forward
        out, _ = _conv_forward(net.layers[0], net.params[0], x)
        assert np.allclose(out, naive_conv(x, w, b, 1, 1), atol=1e-12)

    def test_scatter_path_binary_values(self):
        # a couple of isolated pixels, includes image corners
        x = np.zeros((2, 10, 10, 2))
        x[0, 0, 0, 0] = 1.0
        x[0, 9, 9, 1] = 1.0
        x[1, 4, 5, 0] = 1.0
        net = conv_net((10, 10, 2), Conv(3, 3, 1, 1))
        net.init_parameters(4)
        w, b = net.params[0]["w"], net.params[0]["b"]
        from palletrack.cnn import _conv_forward
        out, _ = _conv_forward(net.layers[0], net.params[0], x)
        assert np.allclose(out, naive_conv(x, w, b, 1, 1), atol=1e-12)


def finite_difference_grads(net, x, y, step=1e-5):
    """Central-difference oracle for every parameter of the network."""

    def loss():
        l, _ = loss_and_gradients(net, x, y)
        return l

    fd = []
    for p in net.params:
        if p is None:
            fd.append(None)
            continue
        entry = {}
        for name in ("w", "b"):
            a = p[name]
            g = np.zeros_like(a)
            it = np.nditer(a, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = a[idx]
                a[idx] = orig + step
                lp = loss()
                a[idx] = orig - step
                lm = loss()
                a[idx] = orig
                g[idx] = (lp - lm) / (2 * step)
            entry[name] = g
        fd.append(entry)
    return fd


def assert_grads_close(analytic, numeric, rel=1e-4):
    for ga, gn in zip(analytic, numeric):
        if ga is None:
            assert gn is None
            continue
        for name in ("w", "b"):
            a, f = ga[name], gn[name]
            err = np.abs(a - f) / np.maximum(np.abs(a) + np.abs(f), 1e-6)
            assert err.max() < rel, f"{name}: max rel err {err.max():.2e}"


class TestGradients:
    """Analytic gradients vs central finite differences, every layer kind."""

    def test_dense_softmax(self):
        rng = np.random.default_rng(0)
        net = Network((3, 3, 1), [Dense(4), Relu(), Dense(2), Softmax()])
        net.init_parameters(1)
        x = rng.standard_normal((2, 3, 3, 1))
        y = np.array([0, 1])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_conv_padded(self):
        rng = np.random.default_rng(1)
        net = Network((6, 6, 2), [Conv(3, 3, 1, 1), Relu(), Dense(2),
                                  Softmax()])
        net.init_parameters(2)
        x = rng.standard_normal((2, 6, 6, 2))
        y = np.array([1, 0])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_conv_strided(self):
        rng = np.random.default_rng(2)
        net = Network((7, 7, 1), [Conv(3, 3, 2, 0), Relu(), Dense(2),
                                  Softmax()])
        net.init_parameters(3)
        x = rng.standard_normal((2, 7, 7, 1))
        y = np.array([0, 0])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_maxpool(self):
        rng = np.random.default_rng(3)
        net = Network((6, 6, 2), [Conv(3, 3, 1, 1), Relu(), MaxPool(3, 1),
                                  Dense(2), Softmax()])
        net.init_parameters(4)
        x = rng.standard_normal((2, 6, 6, 2))
        y = np.array([1, 1])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_maxpool_strided(self):
        rng = np.random.default_rng(4)
        net = Network((8, 8, 1), [Conv(2, 3, 1, 1), Relu(), MaxPool(2, 2),
                                  Dense(2), Softmax()])
        net.init_parameters(5)
        x = rng.standard_normal((3, 8, 8, 1))
        y = np.array([0, 1, 0])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_two_conv_stack_sparse_input(self):
        # sparse binary input exercises the subset/scatter strategies
        rng = np.random.default_rng(5)
        net = Network((8, 8, 1), [Conv(3, 3, 1, 1), Relu(), Conv(3, 3, 1, 1),
                                  Relu(), MaxPool(3, 1), Dense(2), Softmax()])
        net.init_parameters(6)
        x = (rng.random((2, 8, 8, 1)) < 0.08).astype(float)
        y = np.array([0, 1])
        _, grads = loss_and_gradients(net, x, y)
        assert_grads_close(grads, finite_difference_grads(net, x, y))

    def test_confident_prediction_has_tiny_gradient(self):
        net = Network((2, 2, 1), [Dense(2), Softmax()]).init_parameters(0)
        net.params[0]["w"][:] = 0.0
        net.params[0]["b"][:] = (50.0, -50.0)  # saturated toward class 0
        grads = backward(net, np.ones((2, 2, 1)), 0)
        norm = np.sqrt(sum(float((g[n] ** 2).sum())
                           for g in grads if g for n in ("w", "b")))
        assert norm < 1e-6

    def test_symmetric_input_symmetric_gradients(self):
        net = Network((2, 2, 1), [Dense(2), Softmax()]).init_parameters(0)
        net.params[0]["w"][:] = 0.0
        net.params[0]["b"][:] = 0.0
        grads = backward(net, np.ones((2, 2, 1)), 0)
        gw = grads[0]["w"]
        # identical inputs and symmetric parameters: per-class columns mirror
        assert np.allclose(gw[:, 0], -gw[:, 1])
        assert np.allclose(gw, gw[::-1])
