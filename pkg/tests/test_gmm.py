import numpy as np
import pytest

from bnsv.errors import ConfigError, ParseError
from bnsv.gmm import DiagGmm, llr_score, load_gmm, map_adapt, save_gmm, ubm_train_em


def _two_clusters(seed=0, n=500):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [5.0, 5.0]])
    X = np.vstack([c + 0.1 * rng.standard_normal((n, 2)) for c in centers])
    return X, centers


class TestUbm:
    def test_single_gaussian_closed_form(self):
        X = np.random.default_rng(0).standard_normal((300, 3)) * [1.0, 2.0, 0.5] + 1.0
        gmm = ubm_train_em(X, K=1, iters=3)
        np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(gmm.variances[0], X.var(axis=0), atol=1e-9)
        assert gmm.weights[0] == 1.0

    def test_two_clusters(self):
        X, centers = _two_clusters()
        gmm = ubm_train_em(X, K=2, iters=10)
        found = gmm.means[np.argsort(gmm.means[:, 0])]
        assert np.max(np.abs(found - centers)) < 0.1

    def test_monotone_loglik(self):
        rng = np.random.default_rng(1)
        X = np.vstack([rng.standard_normal((200, 4)) + 3 * rng.standard_normal(4)
                       for _ in range(6)])
        history = []
        ubm_train_em(X, K=16, iters=20, history=history)
        assert len(history) == 21
        h = np.array(history)
        assert np.all(h[1:] >= h[:-1] - 1e-8 * np.abs(h[:-1]))

    def test_invariants(self):
        X, _ = _two_clusters(1)
        gmm = ubm_train_em(X, K=4, iters=5)
        assert abs(gmm.weights.sum() - 1) < 1e-9
        assert np.all(gmm.variances >= 1e-4 * X.var(axis=0) - 1e-15)

    def test_deterministic(self):
        X, _ = _two_clusters(2)
        a, b = ubm_train_em(X, 3, 5, seed=7), ubm_train_em(X, 3, 5, seed=7)
        np.testing.assert_array_equal(a.means, b.means)

    def test_too_few_frames(self):
        with pytest.raises(ConfigError):
            ubm_train_em(np.zeros((3, 2)), K=4)


def _ubm():
    return DiagGmm(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [10.0, 10.0]]), np.ones((2, 2)))


class TestMap:
    def test_zero_enrollment(self):
        ubm = _ubm()
        model = map_adapt(ubm, np.zeros((0, 2)))
        for name in ("weights", "means", "variances"):
            np.testing.assert_array_equal(getattr(model, name), getattr(ubm, name))

    def test_large_relevance(self):
        ubm = _ubm()
        model = map_adapt(ubm, np.full((5, 2), 3.0), relevance=1e12)
        np.testing.assert_allclose(model.means, ubm.means, atol=1e-9)

    def test_single_component_midpoint(self):
        ubm = DiagGmm(np.array([1.0]), np.array([[0.0, 2.0]]), np.ones((1, 2)))
        X = np.random.default_rng(0).standard_normal((10, 2)) + [4.0, -1.0]
        model = map_adapt(ubm, X, relevance=10.0, iterations=1)
        expected = 0.5 * X.mean(axis=0) + 0.5 * ubm.means[0]
        np.testing.assert_allclose(model.means[0], expected, atol=1e-12)

    def test_only_means_move(self):
        ubm = _ubm()
        model = map_adapt(ubm, np.full((20, 2), 1.0))
        np.testing.assert_array_equal(model.weights, ubm.weights)
        np.testing.assert_array_equal(model.variances, ubm.variances)


class TestLlr:
    def test_identical_models(self):
        ubm = _ubm()
        assert llr_score(ubm, ubm, np.random.default_rng(0).standard_normal((7, 2))) == 0.0

    def test_target_region_positive(self):
        ubm = _ubm()
        target = map_adapt(ubm, np.full((50, 2), 3.0), relevance=1.0)
        assert llr_score(target, ubm, np.full((5, 2), 3.0)) > 0

    def test_duplicated_frames(self):
        ubm = _ubm()
        target = map_adapt(ubm, np.full((50, 2), 2.0))
        X = np.random.default_rng(1).standard_normal((6, 2))
        assert llr_score(target, ubm, X) == pytest.approx(llr_score(target, ubm, np.repeat(X, 2, 0)),
                                                          rel=1e-13)


class TestGmmFile:
    def test_round_trip(self, tmp_path):
        gmm = ubm_train_em(_two_clusters()[0], K=3, iters=2)
        save_gmm(tmp_path / "g.bng", gmm)
        back = load_gmm(tmp_path / "g.bng")
        for name in ("weights", "means", "variances"):
            np.testing.assert_array_equal(getattr(back, name), getattr(gmm, name))

    def test_truncated(self, tmp_path):
        save_gmm(tmp_path / "g.bng", _ubm())
        data = (tmp_path / "g.bng").read_bytes()
        (tmp_path / "t.bng").write_bytes(data[:-1])
        with pytest.raises(ParseError) as info:
            load_gmm(tmp_path / "t.bng")
        assert 12 <= info.value.offset < len(data)

    def test_wrong_magic(self, tmp_path):
        save_gmm(tmp_path / "g.bng", _ubm())
        data = (tmp_path / "g.bng").read_bytes()
        (tmp_path / "m.bng").write_bytes(b"BNP1" + data[4:])
        with pytest.raises(ParseError, match="bad magic") as info:
            load_gmm(tmp_path / "m.bng")
        assert info.value.offset == 0
