"""Tests for the network core: layers, autodiff, optimizer, serialization.

Gradient correctness is checked against central finite differences, the
convolution against a hand-computed oracle, and Adam against its
closed-form moment recursion.
"""

import numpy as np
import pytest

from varexplain.nncore.layers import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool2d,
    ReLU,
    ShapeError,
    Softplus,
    build_layer,
    conv_out_size,
    dropout_mask,
    sigmoid,
)
from varexplain.nncore.network import Network, StaleTapeError
from varexplain.nncore.io import CheckpointError, load_network, save_network
from varexplain.nncore.optim import AdamState, NonFiniteGradientError, adam_step


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f()
        x[i] = orig - eps
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g


def net_param_grads_oracle(net, x):
    """Finite-difference gradients of sum(net(x)) wrt every parameter."""
    def loss():
        net.bump_version()
        out, _ = net.forward(x, mode="eval")
        return float(np.sum(out))
    grads = [numeric_grad(loss, p) for p in net.params()]
    net.bump_version()
    return grads


def mlp(input_dim, hidden, out, seed=0, softplus=False):
    specs = []
    for h in hidden:
        specs.append(LayerSpec("dense", units=h))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("dense", units=out))
    if softplus:
        specs.append(LayerSpec("softplus"))
    return Network(specs, (input_dim,), seed)


class TestLayerSpec:
    def test_roundtrip(self):
        spec = LayerSpec("conv2d", filters=8, kernel=3, stride=1, padding=1)
        again = LayerSpec.from_dict(spec.to_dict())
        assert again == spec

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            build_layer(LayerSpec("fourier"), (4,), np.random.default_rng(0))

    def test_conv_out_size(self):
        # (64 + 2*1 - 3) / 1 + 1 = 64
        assert conv_out_size(64, 3, 1, 1) == 64
        assert conv_out_size(28, 2, 2, 0) == 14


class TestForwardShapes:
    def test_mlp_output_shape(self):
        net = mlp(5, [8, 4], 2)
        out, _ = net.forward(np.zeros((7, 5)), mode="eval")
        assert out.shape == (7, 2)

    def test_conv_pipeline_shape(self):
        specs = [
            LayerSpec("conv2d", filters=4, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool2d", pool=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=3),
        ]
        net = Network(specs, (1, 8, 8), 0)
        out, _ = net.forward(np.zeros((2, 1, 8, 8)), mode="eval")
        assert out.shape == (2, 3)

    def test_bad_input_shape_raises(self):
        net = mlp(5, [4], 1)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((3, 6)), mode="eval")


class TestConvOracle:
    def test_hand_computed_3x3_sum_kernel(self):
        """All-ones 3x3 kernel, zero padding 1: the output at each pixel is
        the sum of the 3x3 neighborhood. Checked on a ramp image."""
        rng = np.random.default_rng(0)
        conv = Conv2d(LayerSpec("conv2d", filters=1, kernel=3, stride=1, padding=1),
                      (1, 3, 3), rng, "conv")
        conv.W[:] = 1.0
        conv.b[:] = 0.0
        img = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        out, _ = conv.forward(img)
        # center pixel: sum of all nine values = 36; corner (0,0): 0+1+3+4=8
        assert out[0, 0, 1, 1] == pytest.approx(36.0)
        assert out[0, 0, 0, 0] == pytest.approx(8.0)
        assert out[0, 0, 2, 2] == pytest.approx(5 + 7 + 8 + 4)

    def test_matches_direct_convolution(self):
        """im2col path agrees with an explicit loop convolution."""
        rng = np.random.default_rng(3)
        conv = Conv2d(LayerSpec("conv2d", filters=2, kernel=3, stride=1, padding=1),
                      (2, 5, 5), rng, "conv")
        x = rng.standard_normal((1, 2, 5, 5))
        out, _ = conv.forward(x)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for f in range(2):
            for i in range(5):
                for j in range(5):
                    want = np.sum(conv.W[f] * xp[0, :, i:i + 3, j:j + 3]) + conv.b[f]
                    assert out[0, f, i, j] == pytest.approx(want, rel=1e-12)


class TestMaxPool:
    def test_forward_and_argmax_routing(self):
        rng = np.random.default_rng(0)
        pool = MaxPool2d(LayerSpec("maxpool2d", pool=2), (1, 4, 4), rng, "pool")
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out, cache = pool.forward(x)
        assert out.reshape(-1).tolist() == [5, 7, 13, 15]
        # gradient flows only to the max positions
        gx = pool.backward(np.ones_like(out), cache)[0]
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, [1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
        np.testing.assert_array_equal(gx, expected)


class TestActivations:
    def test_relu(self):
        rng = np.random.default_rng(0)
        relu = ReLU(LayerSpec("relu"), (4,), rng, "relu")
        x = np.array([[-1.0, 0.0, 2.0, -0.5]])
        out, cache = relu.forward(x)
        np.testing.assert_array_equal(out, [[0, 0, 2, 0]])
        gx = relu.backward(np.ones_like(out), cache)[0]
        np.testing.assert_array_equal(gx, [[0, 0, 1, 0]])

    def test_softplus_is_stable_and_positive(self):
        rng = np.random.default_rng(0)
        sp = Softplus(LayerSpec("softplus"), (3,), rng, "softplus")
        x = np.array([[-800.0, 0.0, 800.0]])
        out, _ = sp.forward(x)
        assert np.all(np.isfinite(out))
        assert np.all(out >= 0)
        assert out[0, 1] == pytest.approx(np.log(2))
        assert out[0, 2] == pytest.approx(800.0)

    def test_sigmoid_stable(self):
        assert sigmoid(np.array([800.0]))[0] == pytest.approx(1.0)
        assert sigmoid(np.array([-800.0]))[0] == pytest.approx(0.0)
        assert sigmoid(np.array([0.0]))[0] == pytest.approx(0.5)


class TestDropout:
    def test_eval_mode_is_identity(self):
        rng = np.random.default_rng(0)
        drop = Dropout(LayerSpec("dropout", rate=0.5), (10,), rng, "dropout")
        x = np.random.default_rng(1).standard_normal((4, 10))
        out, _ = drop.forward(x)
        np.testing.assert_array_equal(out, x)

    def test_train_mode_scales_kept_units(self):
        mask = dropout_mask((2000, 50), 0.2, np.random.default_rng(0))
        # inverted dropout: kept entries are 1/(1-rate)
        kept = mask[mask > 0]
        np.testing.assert_allclose(kept, 1 / 0.8)
        assert abs(np.mean(mask > 0) - 0.8) < 0.02


class TestGradients:
    def test_mlp_gradcheck(self):
        rng = np.random.default_rng(5)
        net = mlp(4, [8, 6], 2, seed=1, softplus=True)
        x = rng.standard_normal((3, 4))
        out, tape = net.forward(x, mode="eval")
        grads, _ = net.backward(tape, np.ones_like(out))
        oracle = net_param_grads_oracle(net, x)
        for g, o in zip(grads, oracle):
            np.testing.assert_allclose(g, o, rtol=1e-5, atol=1e-7)

    def test_conv_net_gradcheck(self):
        rng = np.random.default_rng(6)
        specs = [
            LayerSpec("conv2d", filters=3, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool2d", pool=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=2),
        ]
        net = Network(specs, (1, 6, 6), 2)
        x = rng.standard_normal((2, 1, 6, 6))
        out, tape = net.forward(x, mode="eval")
        grads, _ = net.backward(tape, np.ones_like(out))
        oracle = net_param_grads_oracle(net, x)
        for g, o in zip(grads, oracle):
            np.testing.assert_allclose(g, o, rtol=1e-4, atol=1e-6)

    def test_input_gradient(self):
        rng = np.random.default_rng(7)
        net = mlp(5, [7], 1, seed=3, softplus=True)
        x = rng.standard_normal((2, 5))
        out, tape = net.forward(x, mode="eval")
        _, gx = net.backward(tape, np.ones_like(out))

        def loss():
            net.bump_version()
            o, _ = net.forward(x, mode="eval")
            return float(np.sum(o))

        oracle = numeric_grad(loss, x)
        np.testing.assert_allclose(gx, oracle, rtol=1e-5, atol=1e-8)

    def test_random_small_nets_gradcheck(self):
        """Sweep of random architectures; relative error < 1e-4."""
        rng = np.random.default_rng(11)
        for trial in range(20):
            d = int(rng.integers(2, 6))
            h = int(rng.integers(2, 9))
            net = mlp(d, [h], int(rng.integers(1, 3)), seed=trial, softplus=bool(trial % 2))
            x = rng.standard_normal((2, d))
            out, tape = net.forward(x, mode="eval")
            grads, _ = net.backward(tape, np.ones_like(out))
            oracle = net_param_grads_oracle(net, x)
            for g, o in zip(grads, oracle):
                denom = np.maximum(np.abs(o), 1e-3)
                assert np.max(np.abs(g - o) / denom) < 1e-4


class TestTapeDiscipline:
    def test_stale_tape_rejected(self):
        net = mlp(3, [4], 1)
        x = np.zeros((1, 3))
        out, tape = net.forward(x, mode="eval")
        net.bump_version()
        with pytest.raises(StaleTapeError):
            net.backward(tape, np.ones_like(out))

    def test_clone_is_independent(self):
        net = mlp(3, [4], 1, seed=9)
        twin = net.clone()
        twin.params()[0][:] = 0.0
        assert not np.allclose(net.params()[0], 0.0)


class TestAdam:
    def test_matches_closed_form_recursion(self):
        """Three steps on a single parameter against the textbook update."""
        p = np.array([1.0])
        grads_seq = [np.array([0.3]), np.array([-0.2]), np.array([0.05])]
        state = AdamState([p])
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        m = v = 0.0
        expected = 1.0
        for t, g in enumerate(grads_seq, start=1):
            adam_step([p], [g.copy()], state, lr=lr)
            m = b1 * m + (1 - b1) * float(g[0])
            v = b2 * v + (1 - b2) * float(g[0]) ** 2
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            expected -= lr * mhat / (np.sqrt(vhat) + eps)
            assert p[0] == pytest.approx(expected, rel=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        p = np.zeros(3)
        state = AdamState([p])
        with pytest.raises(NonFiniteGradientError, match="layer0/W"):
            adam_step([p], [np.array([np.nan, 0, 0])], state, lr=0.1,
                      names=["layer0/W"])

    def test_state_shape_mismatch(self):
        state = AdamState([np.zeros(3)])
        with pytest.raises(ValueError):
            adam_step([np.zeros(4)], [np.zeros(4)], state, lr=0.1)


class TestSerialization:
    def test_roundtrip_bitexact(self, tmp_path):
        net = mlp(6, [8, 4], 2, seed=12, softplus=True)
        path = tmp_path / "model.nn"
        save_network(net, path)
        again = load_network(path)
        assert [s.to_dict() for s in again.specs] == [s.to_dict() for s in net.specs]
        for a, b in zip(net.params(), again.params()):
            np.testing.assert_array_equal(a, b)
        x = np.random.default_rng(0).standard_normal((3, 6))
        np.testing.assert_array_equal(net.forward(x, mode="eval")[0],
                                      again.forward(x, mode="eval")[0])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.nn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_network(path)
