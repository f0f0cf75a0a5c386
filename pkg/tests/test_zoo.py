import numpy as np
import pytest

from mapnet import tensor as T
from mapnet import zoo
from mapnet.errors import ConfigError, ContractError
from mapnet.mapping import build_plan, generate_all
from mapnet.losses import task_loss
from conftest import central_diff, rel_err


class TestSpecs:
    def test_mlp_count(self):
        assert zoo.build_spec(zoo.mlp([784, 128, 10])).flat_size == 784 * 128 + 128 + 128 * 10 + 10 == 101_770

    def test_lstm_count(self):
        spec = zoo.build_spec(zoo.lstm(input_size=8, hidden_size=32, output_size=0))
        assert spec.flat_size == 4 * 32 * (8 + 32) + 4 * 32 == 5248

    def test_cnn_small_near_reference_size(self):
        p = zoo.build_spec(zoo.cnn_small()).flat_size
        assert abs(p - 108_618) / 108_618 <= 0.05

    def test_cnn_large_near_reference_size(self):
        p = zoo.build_spec(zoo.cnn_large()).flat_size
        assert abs(p - 538_000) / 538_000 <= 0.05

    @pytest.mark.parametrize("arch", [zoo.mlp([5, 7, 3]), zoo.cnn_small(), zoo.lstm(2, 4, 1),
                                      zoo.mlp([6, 4, 2], lrd={"fc1": 2})])
    def test_offsets_tile(self, arch):
        spec = zoo.build_spec(arch)
        offs = spec.offsets
        assert all(a < b for a, b in zip(offs, offs[1:]))
        assert offs[-1] + spec.sizes[-1] == spec.flat_size == sum(l.size for l in spec)

    def test_deterministic(self):
        assert zoo.build_spec(zoo.cnn_small()) == zoo.build_spec(zoo.cnn_small())

    @pytest.mark.parametrize("hyper", [{"sizes": [4, 0, 2]}, {"sizes": [4, -3, 2]}])
    def test_zero_extent_rejected(self, hyper):
        with pytest.raises(ConfigError):
            zoo.build_spec(zoo.TargetArchitecture("mlp", hyper))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            zoo.TargetArchitecture("transformer")

    def test_round_trip_dict(self):
        arch = zoo.mlp([3, 5, 2], lrd={"fc1": 2})
        assert zoo.TargetArchitecture.from_dict(arch.to_dict()) == arch

    def test_groups(self):
        spec = zoo.build_spec(zoo.mlp([3, 5, 2]))
        assert spec.groups() == [["fc1.weight", "fc1.bias"], ["fc2.weight", "fc2.bias"]]


class TestForward:
    def test_zero_params_zero_logits(self):
        arch = zoo.mlp([4, 6, 3])
        params = [np.zeros(l.shape) for l in zoo.build_spec(arch)]
        out = zoo.forward(arch, params, np.random.default_rng(0).standard_normal((5, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((5, 3)))

    def test_identity_linear_layer(self):
        arch = zoo.mlp([3, 3])
        x = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
        out = zoo.forward(arch, [np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32)], x)
        np.testing.assert_array_equal(out.data, x)

    def test_shape_mismatch_names_layer(self):
        arch = zoo.mlp([4, 6, 3])
        params = [np.zeros(l.shape) for l in zoo.build_spec(arch)]
        params[2] = np.zeros((5, 3))
        with pytest.raises(ContractError, match="fc2.weight"):
            zoo.forward(arch, params, np.zeros((1, 4)))

    def test_cnn_output_shape(self):
        arch = zoo.cnn_small()
        params = zoo.init_params(arch, np.random.default_rng(0))
        out = zoo.forward(arch, params, np.zeros((2, 784), dtype=np.float32))
        assert out.shape == (2, 10)

    def test_lstm_matches_reference_loop(self, f64):
        arch = zoo.lstm(2, 3, 1)
        rng = np.random.default_rng(2)
        params = zoo.init_params(arch, rng, dtype=np.float64)
        x = rng.standard_normal((4, 5, 2))
        named = dict(zip(zoo.build_spec(arch).names, params))
        sig = lambda v: 1 / (1 + np.exp(-v))
        h = np.zeros((4, 3))
        c = np.zeros((4, 3))
        for t in range(5):
            inp = np.concatenate([x[:, t], h], axis=1)
            gate = {g: inp @ named[f"lstm.W_{g}"].T + named[f"lstm.b_{g}"] for g in "ifgo"}
            c = sig(gate["f"]) * c + sig(gate["i"]) * np.tanh(gate["g"])
            h = sig(gate["o"]) * np.tanh(c)
        ref = h @ named["fc.weight"] + named["fc.bias"]
        np.testing.assert_allclose(zoo.forward(arch, params, x).data, ref, rtol=1e-12)

    def test_latent_gradient_through_network(self, f64):
        arch = zoo.mlp([3, 8, 4])
        plan = build_plan(arch, "slvt", 4, seed=3, z_scale=1.0, out_scale=1.0, dtype=np.float64)
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((5, 3)), rng.integers(0, 4, 5)
        st = plan.units[0].state

        def loss_at(z):
            st.assign("z", z)
            return float(task_loss(zoo.forward(arch, generate_all(plan), x), y).data)

        z0 = st.z.data.copy()
        fd = central_diff(loss_at, z0)
        st.assign("z", z0)
        with T.Tape() as tape:
            tape.backward(task_loss(zoo.forward(arch, generate_all(plan), x), y))
        assert rel_err(st.z.grad, fd) < 1e-6


class TestLowRank:
    def test_generated_count(self):
        spec = zoo.build_spec(zoo.mlp([100, 200], lrd={"fc1": 16}))
        factors = [l.size for l in spec if l.role in ("lrd_U", "lrd_V")]
        assert sum(factors) == 16 * (100 + 200) == 4800
        assert zoo.build_spec(zoo.mlp([100, 200])).layers[0].size == 20_000

    def test_full_rank_matches_dense(self, f64):
        rng = np.random.default_rng(5)
        W, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
        V = rng.standard_normal((3, 3))
        U = W @ V @ np.linalg.inv(V.T @ V)
        x = rng.standard_normal((6, 4))
        dense = zoo.forward(zoo.mlp([4, 3]), [W, b], x).data
        low = zoo.forward_lrd(zoo.mlp([4, 3], lrd={"fc1": 3}), [U, V, b], x).data
        np.testing.assert_allclose(low, dense, atol=1e-5)

    def test_rank_zero_forbidden(self):
        with pytest.raises(ConfigError):
            zoo.build_spec(zoo.mlp([4, 3], lrd={"fc1": 0}))

    def test_rank_mismatch(self):
        arch = zoo.mlp([4, 3], lrd={"fc1": 2})
        with pytest.raises(ContractError):
            zoo.forward_lrd(arch, [np.zeros((4, 2)), np.zeros((3, 1)), np.zeros(3)], np.zeros((1, 4)))

    def test_unknown_lrd_layer(self):
        with pytest.raises(ConfigError, match="fc9"):
            zoo.build_spec(zoo.mlp([4, 3], lrd={"fc9": 2}))
