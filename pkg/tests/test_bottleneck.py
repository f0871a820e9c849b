import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnsv.bottleneck import (concat_layers, load_pca, pca_fit, pca_project, pca_reconstruct,
                             save_pca, tap_hidden, tap_layers)
from bnsv.errors import ConfigError, ParseError
from bnsv.frontend import FeatureSequence
from bnsv.netcore import DenseNetwork, GruEncoder, apply_activation, forward, gru_forward


class TestTaps:
    def test_linear_single_layer(self):
        net = DenseNetwork.build(4, [3], "linear", seed=0)
        x = np.random.default_rng(0).standard_normal((5, 4))
        layer = net.layers[0]
        np.testing.assert_array_equal(tap_hidden(net, 1, x), x @ layer.W + layer.b)

    @pytest.mark.parametrize("layer", [1, 2, 3, 4, 5, 6])
    def test_consistent_with_forward(self, layer):
        net = DenseNetwork.build(8, [6] * 6, "gelu", seed=1)
        x = np.random.default_rng(1).standard_normal((4, 8))
        pre = tap_hidden(net, layer, x)
        state = forward(net, x)
        np.testing.assert_array_equal(pre, state.pre[layer - 1])
        np.testing.assert_array_equal(apply_activation("gelu", pre)[0], state.post[layer - 1])

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            tap_hidden(DenseNetwork.build(2, [3, 3], "relu"), 3, np.zeros((1, 2)))

    def test_gru_tap(self):
        enc = GruEncoder.build(3, 5, 3, seed=0)
        x = np.random.default_rng(0).standard_normal((9, 3))
        full = gru_forward(enc, x)
        for ly in (1, 2, 3):
            np.testing.assert_array_equal(tap_hidden(enc, ly, x), full.hidden(ly)[0])

    def test_layer_selection(self):
        net = DenseNetwork.build(4, [5, 6, 7], "sigmoid", seed=2)
        x = np.ones((3, 4))
        out = tap_layers(net, [1, 3], x)
        assert out.shape == (3, 12)
        np.testing.assert_array_equal(out[:, 5:], tap_hidden(net, 3, x))


class TestConcat:
    def test_single(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(concat_layers([a]), a)

    def test_wide_layers(self):
        assert concat_layers([np.zeros((2, 1024)), np.zeros((2, 1024))]).shape == (2, 2048)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            concat_layers([np.zeros((2, 3)), np.zeros((3, 3))])


class TestPca:
    def test_subspace_data_reconstructs(self):
        rng = np.random.default_rng(0)
        basis = rng.standard_normal((3, 10))
        data = rng.standard_normal((200, 3)) @ basis + rng.standard_normal(10)
        model = pca_fit(data, 3)
        back = pca_reconstruct(model, pca_project(model, data))
        assert np.max(np.abs(back - data)) < 1e-9

    def test_full_rank_is_isometry(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((50, 6))
        model = pca_fit(data, 6)
        y = pca_project(model, data)
        np.testing.assert_allclose(np.linalg.norm(y, axis=1),
                                   np.linalg.norm(data - model.mean, axis=1), rtol=1e-12)
        np.testing.assert_allclose(pca_reconstruct(model, y), data, atol=1e-12)

    def test_eigen_oracle(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((200, 10)) @ rng.standard_normal((10, 10))
        model = pca_fit(data, 3)
        xc = data - data.mean(axis=0)
        cov = xc.T @ xc / (len(data) - 1)
        evals = np.sort(np.linalg.eigvals(cov).real)[::-1][:3]
        np.testing.assert_allclose(model.explained_variance, evals, rtol=0, atol=1e-9)

    def test_mean_projects_to_zero(self):
        data = np.random.default_rng(3).standard_normal((30, 5))
        model = pca_fit(data, 2)
        np.testing.assert_allclose(pca_project(model, model.mean[None]), 0.0, atol=1e-15)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_orthonormal(self, seed, k):
        data = np.random.default_rng(seed).standard_normal((40, 8))
        P = pca_fit(data, k).components
        assert np.max(np.abs(P.T @ P - np.eye(k))) < 1e-9

    def test_sequence_kind(self):
        model = pca_fit(np.random.default_rng(4).standard_normal((30, 4)), 2)
        out = pca_project(model, FeatureSequence(np.ones((3, 4))))
        assert out.kind == "bottleneck" and out.dim == 2

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            pca_fit(np.zeros((3, 5)), 3)

    def test_round_trip(self, tmp_path):
        model = pca_fit(np.random.default_rng(5).standard_normal((40, 6)), 4)
        save_pca(tmp_path / "p.bnp", model)
        back = load_pca(tmp_path / "p.bnp")
        for name in ("mean", "components", "explained_variance"):
            np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
        raw = (tmp_path / "p.bnp").read_bytes()
        save_pca(tmp_path / "q.bnp", back)
        assert (tmp_path / "q.bnp").read_bytes() == raw

    def test_truncated(self, tmp_path):
        save_pca(tmp_path / "p.bnp", pca_fit(np.random.default_rng(6).standard_normal((20, 3)), 2))
        data = (tmp_path / "p.bnp").read_bytes()
        (tmp_path / "t.bnp").write_bytes(data[:30])
        with pytest.raises(ParseError):
            load_pca(tmp_path / "t.bnp")
