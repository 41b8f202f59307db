import numpy as np
import pytest

from conftest import TINY_ARCH, naive_conv, random_net
from facemap import cnn
from facemap.errors import ConfigError, ShapeMismatch, UnknownLayerKind, ZeroFeature
from facemap.tensor import write_tensor


class TestParseArch:
    def test_unknown_kind(self):
        with pytest.raises(UnknownLayerKind):
            cnn.parse_arch("input 8 8 3\ntap x\nsoftmax name=x\n")

    def test_missing_tap(self):
        with pytest.raises(ConfigError):
            cnn.parse_arch("input 8 8 3\nconv name=c out=2 k=3x3\n")

    def test_tap_must_exist(self):
        with pytest.raises(ConfigError):
            cnn.parse_arch("input 8 8 3\ntap nope\nrelu name=r\n")

    def test_duplicate_name(self):
        with pytest.raises(ConfigError):
            cnn.parse_arch("input 8 8 3\ntap r\nrelu name=r\nrelu name=r\n")

    def test_geometry_validated_at_parse(self):
        with pytest.raises(ConfigError):
            cnn.parse_arch("input 4 4 3\ntap p\nmaxpool name=p k=9 stride=1\n")


class TestShapes:
    def test_bundled_tap_dims(self):
        vgg = cnn.parse_arch(cnn.builtin_arch("vgg_s"))
        assert vgg.tap_shape() == (6, 6, 512)
        assert vgg.tap_dim() == 18432
        alex = cnn.parse_arch(cnn.builtin_arch("alexnet"))
        assert alex.tap_shape() == (6, 6, 256)
        assert alex.tap_dim() == 9216

    def test_shape_algebra_matches_forward(self, tiny_net):
        rng = np.random.default_rng(0)
        acts = cnn.forward(tiny_net, rng.standard_normal((12, 12, 3)))
        for name, shape in tiny_net.layer_output_shapes():
            assert acts[name].shape == shape

    def test_shape_algebra_matches_forward_random_nets(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            model = random_net(rng)
            x = rng.standard_normal(model.input_size)
            acts = cnn.forward(model, x)
            for name, shape in model.layer_output_shapes():
                assert acts[name].shape == shape


class TestForward:
    def test_identity_kernel(self):
        arch = "input 5 5 3\ntap c\nconv name=c out=3 k=1x1 stride=1 pad=0\n"
        model = cnn.parse_arch(arch)
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        model.weights = {"c": (w, np.zeros(3))}
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 5, 3))
        np.testing.assert_array_equal(cnn.forward(model, x)["c"], x)

    def test_maxpool_by_hand(self):
        model = cnn.parse_arch("input 3 3 1\ntap p\nmaxpool name=p k=2 stride=1\n")
        out = cnn.forward(model, np.arange(1.0, 10.0).reshape(3, 3, 1))["p"]
        np.testing.assert_array_equal(out[:, :, 0], [[5.0, 6.0], [8.0, 9.0]])

    def test_against_naive_convolution(self):
        # independent oracle: six nested loops
        rng = np.random.default_rng(3)
        for _ in range(3):
            model = random_net(rng)
            x = rng.standard_normal(model.input_size)
            acts = cnn.forward(model, x)
            cur = x
            for spec in model.layers:
                if spec.kind == "conv":
                    w, b = model.weights[spec.name]
                    cur = naive_conv(cur, w, b, spec.stride, spec.pad)
                elif spec.kind == "relu":
                    cur = np.maximum(cur, 0.0)
                np.testing.assert_allclose(acts[spec.name], cur, atol=1e-10)

    def test_translation_consistency(self):
        # pad-0 stride-1 conv: shifting the input shifts the activation
        arch = "input 10 10 3\ntap c\nconv name=c out=4 k=3x3 stride=1 pad=0\n"
        model = cnn.parse_arch(arch)
        cnn.init_weights(model, seed=4)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((10, 10, 3))
        shifted = np.roll(x, 1, axis=0)
        a = cnn.forward(model, x)["c"]
        b = cnn.forward(model, shifted)["c"]
        np.testing.assert_allclose(b[1:], a[:-1], atol=1e-12)

    def test_input_shape_checked(self, tiny_net):
        with pytest.raises(ShapeMismatch):
            cnn.forward(tiny_net, np.zeros((8, 8, 3)))

    def test_fc_layer(self):
        arch = "input 4 4 2\ntap f\nfc name=f out=3\n"
        model = cnn.parse_arch(arch)
        rng = np.random.default_rng(6)
        w = rng.standard_normal((3, 32))
        b = rng.standard_normal(3)
        model.weights = {"f": (w, b)}
        x = rng.standard_normal((4, 4, 2))
        np.testing.assert_allclose(cnn.forward(model, x)["f"],
                                   w @ x.ravel() + b, atol=1e-12)


class TestWeightsIO:
    def test_round_trip_and_validation(self, tmp_path, tiny_net):
        arch_path = tmp_path / "arch.txt"
        arch_path.write_text(TINY_ARCH)
        cnn.save_weights(tiny_net, tmp_path)
        model = cnn.load_model(arch_path, tmp_path)
        for name, (w, b) in tiny_net.weights.items():
            np.testing.assert_array_equal(model.weights[name][0], w)
            np.testing.assert_array_equal(model.weights[name][1], b)

    def test_wrong_channel_count(self, tmp_path, tiny_net):
        arch_path = tmp_path / "arch.txt"
        arch_path.write_text(TINY_ARCH)
        cnn.save_weights(tiny_net, tmp_path)
        w, b = tiny_net.weights["c1"]
        write_tensor(tmp_path / "c1.w.ftnsr", np.zeros((4, 2, 3, 3)))
        with pytest.raises(ShapeMismatch) as err:
            cnn.load_model(arch_path, tmp_path)
        assert "c1" in str(err.value)

    def test_missing_weights(self, tmp_path, tiny_net):
        arch_path = tmp_path / "arch.txt"
        arch_path.write_text(TINY_ARCH)
        with pytest.raises(ShapeMismatch):
            cnn.load_model(arch_path, tmp_path)

    def test_init_deterministic(self):
        a = cnn.parse_arch(TINY_ARCH)
        b = cnn.parse_arch(TINY_ARCH)
        cnn.init_weights(a, seed=9)
        cnn.init_weights(b, seed=9)
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name][0], b.weights[name][0])


def normalized_tap_score(model, image, w_vec):
    acts = cnn.forward(model, image)
    a = acts[model.tap].ravel()
    return float(w_vec @ (a / np.linalg.norm(a)))


class TestInputGradient:
    def test_identity_net_analytic(self):
        # single 1x1 identity conv: gradient is the normalization Jacobian
        arch = "input 4 4 3\ntap c\nconv name=c out=3 k=1x1 stride=1 pad=0\n"
        model = cnn.parse_arch(arch)
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        model.weights = {"c": (w, np.zeros(3))}
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 4, 3))
        wv = np.zeros(48)
        wv[5] = 1.0
        g = cnn.input_gradient(model, x, wv)
        a = x.ravel()
        f = a / np.linalg.norm(a)
        expected = (wv - f * (f @ wv)) / np.linalg.norm(a)
        np.testing.assert_allclose(g.ravel(), expected, atol=1e-12)

    def test_zero_weight_vector(self, tiny_net):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((12, 12, 3))
        g = cnn.input_gradient(tiny_net, x, np.zeros(tiny_net.tap_dim()))
        np.testing.assert_array_equal(g, 0.0)

    def test_finite_differences(self, tiny_net):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((12, 12, 3))
        wv = rng.standard_normal(tiny_net.tap_dim())
        g = cnn.input_gradient(tiny_net, x, wv)
        step = 1e-5
        checked = 0
        for _ in range(100):
            i, j, c = (int(rng.integers(12)), int(rng.integers(12)),
                       int(rng.integers(3)))
            e = np.zeros_like(x)
            e[i, j, c] = step
            fd = (normalized_tap_score(tiny_net, x + e, wv)
                  - normalized_tap_score(tiny_net, x - e, wv)) / (2 * step)
            denom = max(abs(fd), abs(g[i, j, c]), 1e-8)
            assert abs(fd - g[i, j, c]) / denom < 1e-5
            checked += 1
        assert checked == 100

    def test_finite_differences_each_layer_kind(self):
        rng = np.random.default_rng(10)
        archs = [
            "input 6 6 2\ntap c\nconv name=c out=3 k=3x3 stride=1 pad=1\n",
            "input 6 6 2\ntap r\nconv name=c out=3 k=3x3 stride=1 pad=0\nrelu name=r\n",
            "input 6 6 2\ntap p\nmaxpool name=p k=2 stride=2\n",
            "input 6 6 2\ntap f\nfc name=f out=5\n",
        ]
        for arch in archs:
            model = cnn.parse_arch(arch)
            cnn.init_weights(model, seed=int(rng.integers(1000)))
            x = rng.standard_normal((6, 6, 2))
            wv = rng.standard_normal(model.tap_dim())
            g = cnn.input_gradient(model, x, wv)
            step = 1e-5
            for _ in range(25):
                i, j, c = (int(rng.integers(6)), int(rng.integers(6)),
                           int(rng.integers(2)))
                e = np.zeros_like(x)
                e[i, j, c] = step
                fd = (normalized_tap_score(model, x + e, wv)
                      - normalized_tap_score(model, x - e, wv)) / (2 * step)
                denom = max(abs(fd), abs(g[i, j, c]), 1e-8)
                assert abs(fd - g[i, j, c]) / denom < 1e-5

    def test_maxpool_tie_routes_to_first(self):
        model = cnn.parse_arch("input 2 2 2\ntap p\nmaxpool name=p k=2 stride=1\n")
        x = np.zeros((2, 2, 2))
        x[:, :, 0] = 3.0                      # four-way tie in channel 0
        x[:, :, 1] = [[0.0, 1.0], [2.0, 5.0]]  # unique max in channel 1
        g = cnn.input_gradient(model, x, np.array([1.0, 0.0]))
        ch0 = g[:, :, 0]
        assert ch0[0, 0] != 0.0
        assert np.all(ch0.ravel()[1:] == 0.0)


class TestExtractFeature:
    def test_unit_norm_and_determinism(self, micro_net):
        rng = np.random.default_rng(11)
        amap = rng.random((20, 24))
        f1 = cnn.extract_feature(micro_net, amap)
        f2 = cnn.extract_feature(micro_net, amap)
        assert f1.shape == micro_net.tap_shape()
        assert abs(np.linalg.norm(f1) - 1.0) < 1e-9
        np.testing.assert_array_equal(f1, f2)

    def test_zero_network_raises(self):
        model = cnn.parse_arch(
            "input 8 8 3\ntap r\nconv name=c out=2 k=3x3 stride=1 pad=1\nrelu name=r\n")
        model.weights = {"c": (np.zeros((2, 3, 3, 3)), np.zeros(2))}
        with pytest.raises(ZeroFeature):
            cnn.extract_feature(model, np.full((8, 8), 0.7))

    def test_vgg_s_feature_dim(self):
        model = cnn.parse_arch(cnn.builtin_arch("vgg_s"))
        cnn.init_weights(model, seed=0)
        f = cnn.extract_feature(model, np.linspace(0, 1, 32 * 32).reshape(32, 32))
        assert f.size == 18432
