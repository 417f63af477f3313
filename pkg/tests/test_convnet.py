from __future__ import annotations

import numpy as np
import pytest
from conftest import TINY_NETWORK

from deepid.config import desk_network
from deepid.convnet import (
    LayerKind,
    LayerSpec,
    NetworkConfig,
    backward,
    conv_backward,
    conv_forward,
    forward,
    init_params,
    load_params,
    local_backward,
    local_forward,
    maxpool_backward,
    maxpool_forward,
    save_params,
    shared_backward,
    shared_forward,
)
from deepid.errors import ConfigError, ShapeError


def numeric_gradient(function, x, eps=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        grad[index] = (function(plus) - function(minus)) / (2 * eps)
    return grad


class TestConfig:
    def test_desk_shapes(self):
        cfg = desk_network()
        assert cfg.shapes[0] == (1, 28, 24)
        assert cfg.shapes[-1] == (20, 2, 2)
        # The DeepID2 layer sees the pooled third-layer maps and the last layer.
        assert cfg.deepid_input_dim == 15 * 3 * 3 + 20 * 2 * 2

    def test_single_scale(self):
        cfg = NetworkConfig.from_dict({**TINY_NETWORK, "multi-scale": False})
        assert cfg.deepid_input_dim == 6 * 2 * 2

    def test_round_trip_dict(self, tiny_net):
        assert NetworkConfig.from_dict(tiny_net.to_dict()) == tiny_net

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError, match="conv1"):
            NetworkConfig.from_dict(
                {
                    **TINY_NETWORK,
                    "layers": [{"name": "conv1", "kind": "conv", "kernel": 9, "channels": 2}],
                }
            )

    def test_grid_must_divide_output(self):
        layers = [
            {"name": "c", "kind": "conv-locally-shared", "kernel": 2, "channels": 2, "grid": [2, 2]}
        ]
        with pytest.raises(ShapeError, match="grid"):
            NetworkConfig.from_dict({"input": [1, 6, 6], "layers": layers})

    def test_unknown_layer_key(self):
        with pytest.raises(ConfigError):
            LayerSpec.from_dict({"name": "c", "kind": "conv", "padding": 1})

    def test_needs_weighted_layer(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_shape=(1, 4, 4), layers=(LayerSpec("r", LayerKind.RELU),))

    def test_duplicate_names(self):
        layers = [{"name": "c", "kind": "conv", "kernel": 2, "channels": 2}] * 2
        with pytest.raises(ConfigError, match="unique"):
            NetworkConfig.from_dict({"input": [1, 6, 6], "layers": layers})

    def test_with_input(self, tiny_net):
        wider = tiny_net.with_input((1, 10, 12))
        assert wider.shapes[-1] == (6, 3, 4)


class TestLayers:
    def test_conv_matches_direct_sum(self, rng):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 2, 3))
        b = rng.normal(size=4)
        out = conv_forward(x, w, b, stride=2)
        assert out.shape == (2, 4, 2, 2)
        expected = np.sum(x[1, :, 2:4, 3:6] * w[3]) + b[3]
        assert out[1, 3, 1, 1] == pytest.approx(expected)

    def test_local_has_per_location_weights(self, rng):
        x = np.ones((1, 1, 3, 3))
        w = np.zeros((2, 2, 1, 1, 2, 2))
        w[1, 0] = 1.0
        out = local_forward(x, w, np.zeros((2, 2, 1)))
        np.testing.assert_array_equal(out[0, 0], [[0.0, 0.0], [4.0, 0.0]])

    def test_shared_equals_conv_with_one_cell(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=3)
        shared = shared_forward(x, w[None, None], b[None, None], (4, 4))
        np.testing.assert_allclose(shared, conv_forward(x, w, b), atol=1e-12)

    def test_shared_with_identical_cells_equals_conv(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=3)
        tiled_w = np.broadcast_to(w, (2, 2, *w.shape)).copy()
        tiled_b = np.broadcast_to(b, (2, 2, 3)).copy()
        shared = shared_forward(x, tiled_w, tiled_b, (4, 4))
        np.testing.assert_allclose(shared, conv_forward(x, w, b), atol=1e-12)

    def test_local_with_tied_weights_equals_conv(self, rng):
        x = rng.normal(size=(2, 2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        tied_w = np.broadcast_to(w, (4, 4, *w.shape)).copy()
        tied_b = np.broadcast_to(b, (4, 4, 3)).copy()
        np.testing.assert_allclose(
            local_forward(x, tied_w, tied_b), conv_forward(x, w, b), atol=1e-12
        )

    def test_maxpool_first_maximum_wins(self):
        x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
        out, argmax = maxpool_forward(x, (2, 2), 2)
        assert out[0, 0, 0, 0] == 1.0
        dx = maxpool_backward(np.ones((1, 1, 1, 1)), argmax, x.shape, (2, 2), 2)
        np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_gradients(self, rng, stride):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        upstream = rng.normal(size=conv_forward(x, w, b, stride).shape)
        dx, dw, db = conv_backward(upstream, x, w, stride)
        np.testing.assert_allclose(
            dx,
            numeric_gradient(lambda v: np.sum(upstream * conv_forward(v, w, b, stride)), x),
            atol=1e-7,
        )
        np.testing.assert_allclose(
            dw,
            numeric_gradient(lambda v: np.sum(upstream * conv_forward(x, v, b, stride)), w),
            atol=1e-7,
        )
        np.testing.assert_allclose(db, upstream.sum(axis=(0, 2, 3)))

    def test_local_gradients(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 3, 2, 2, 2, 2))
        b = rng.normal(size=(3, 3, 2))
        upstream = rng.normal(size=(2, 2, 3, 3))
        dx, dw, db = local_backward(upstream, x, w)
        np.testing.assert_allclose(
            dx, numeric_gradient(lambda v: np.sum(upstream * local_forward(v, w, b)), x), atol=1e-7
        )
        np.testing.assert_allclose(
            dw, numeric_gradient(lambda v: np.sum(upstream * local_forward(x, v, b)), w), atol=1e-7
        )
        np.testing.assert_allclose(
            db, numeric_gradient(lambda v: np.sum(upstream * local_forward(x, w, v)), b), atol=1e-7
        )

    def test_shared_gradients(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        w = rng.normal(size=(2, 2, 2, 1, 2, 2))
        b = rng.normal(size=(2, 2, 2))
        upstream = rng.normal(size=(2, 2, 4, 4))
        dx, dw, db = shared_backward(upstream, x, w)

        def run(x=x, w=w, b=b):
            return np.sum(upstream * shared_forward(x, w, b, (4, 4)))

        np.testing.assert_allclose(dx, numeric_gradient(lambda v: run(x=v), x), atol=1e-7)
        np.testing.assert_allclose(dw, numeric_gradient(lambda v: run(w=v), w), atol=1e-7)
        np.testing.assert_allclose(db, numeric_gradient(lambda v: run(b=v), b), atol=1e-7)


class TestNetwork:
    def test_init_is_deterministic(self, tiny_net):
        a = init_params(tiny_net, 5, n_identities=3)
        b = init_params(tiny_net, 5, n_identities=3)
        for name in a.tensors:
            np.testing.assert_array_equal(a[name], b[name])
        assert a.n_identities == 3
        assert a.margin == 1.0

    def test_different_seeds_differ(self, tiny_net):
        a = init_params(tiny_net, 1, n_identities=3)
        b = init_params(tiny_net, 2, n_identities=3)
        assert not np.array_equal(a["conv1.weight"], b["conv1.weight"])
        assert not np.array_equal(a["deepid.weight"], b["deepid.weight"])

    def test_weight_variance_follows_fan_in(self):
        net = desk_network()
        params = init_params(net, 0, n_identities=10)
        for name, shape in net.parameter_shapes(10).items():
            if not name.endswith(".weight") or name == "softmax.weight":
                continue
            weight = params[name]
            if weight.size < 2000:
                continue
            fan_in = int(np.prod(shape[-3:])) if len(shape) >= 4 else int(shape[-1])
            assert np.var(weight) == pytest.approx(2.0 / fan_in, rel=0.2), name

    def test_parameter_budget(self, tiny_net):
        assert init_params(tiny_net, 0, n_identities=4).num_parameters() < 2000

    def test_single_and_batched_forward(self, tiny_net, rng):
        params = init_params(tiny_net, 0)
        x = rng.normal(size=(3, 1, 8, 8))
        batch, _ = forward(x, params, tiny_net)
        single, _ = forward(x[1], params, tiny_net)
        assert batch.shape == (3, 8)
        np.testing.assert_allclose(single, batch[1])
        assert np.all(batch >= 0.0)

    def test_zero_parameters_give_zero_features(self, tiny_net, rng):
        params = init_params(tiny_net, 0)
        for value in params.tensors.values():
            value[...] = 0.0
        features, _ = forward(rng.normal(size=(2, 1, 8, 8)), params, tiny_net)
        np.testing.assert_array_equal(features, np.zeros((2, 8)))

    def test_input_shape_error(self, tiny_net):
        params = init_params(tiny_net, 0)
        with pytest.raises(ShapeError, match="input"):
            forward(np.zeros((1, 7, 8)), params, tiny_net)

    def test_backward_matches_finite_differences(self, tiny_net, rng):
        params = init_params(tiny_net, 2)
        params.tensors["deepid.bias"] = np.full(8, 0.5)
        x = rng.normal(size=(2, 1, 8, 8))
        upstream = rng.normal(size=(2, 8))
        _, trace = forward(x, params, tiny_net)
        grads, dx = backward(upstream, trace, params, tiny_net)
        assert set(grads) == {
            name for name in tiny_net.parameter_shapes() if not name.startswith("softmax.")
        }

        for name in ("conv1.weight", "conv2.bias", "deepid.weight"):
            def loss(value, name=name):
                tensors = dict(params.tensors)
                tensors[name] = value
                shifted = type(params)(tensors)
                return float(np.sum(upstream * forward(x, shifted, tiny_net)[0]))

            np.testing.assert_allclose(
                grads[name], numeric_gradient(loss, params[name]), rtol=1e-4, atol=1e-7
            )
        np.testing.assert_allclose(
            dx,
            numeric_gradient(lambda v: float(np.sum(upstream * forward(v, params, tiny_net)[0])), x),
            rtol=1e-4,
            atol=1e-7,
        )

    def test_save_and_load(self, tmp_path, tiny_net):
        params = init_params(tiny_net, 1, n_identities=4, margin=0.3)
        save_params(tmp_path / "net.bin", params, tiny_net)
        loaded, cfg = load_params(tmp_path / "net.bin")
        assert cfg == tiny_net
        assert loaded.margin == pytest.approx(0.3)
        for name in params.tensors:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_check_reports_mismatch(self, tiny_net):
        params = init_params(tiny_net, 0)
        params.tensors["conv1.weight"] = np.zeros((1, 1, 1, 1))
        with pytest.raises(ShapeError, match="conv1.weight"):
            params.check(tiny_net)
