import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles
from scipy.stats import ortho_group

from bnsv.errors import ConfigError, DegenerateInputError, ParseError
from bnsv.gmm import DiagGmm
from bnsv.ivector import (BwStats, PldaModel, TvModel, bw_stats, enroll_speaker, extract_ivector,
                          length_normalize, load_plda, load_tv, plda_score, plda_train, save_plda,
                          save_tv, train_tmatrix)

from oracles import dense_ivector, gaussian_logpdf, plda_generative_data, tv_generative_data


def _separated_ubm(K=3, D=2):
    return DiagGmm(np.full(K, 1.0 / K), 30.0 * np.eye(K, D), np.full((K, D), 0.5))


def _random_tv(seed, K=2, D=2, R=1):
    rng = np.random.default_rng(seed)
    ubm = DiagGmm(np.full(K, 1.0 / K), rng.standard_normal((K, D)),
                  rng.uniform(0.5, 2.0, (K, D)))
    return TvModel(rng.standard_normal((K * D, R)), ubm), rng


def _relative(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestBwStats:
    def test_total_count(self):
        ubm = DiagGmm(np.array([0.3, 0.7]), np.array([[0.0, 0.0], [1.0, 1.0]]), np.ones((2, 2)))
        stats = bw_stats(ubm, np.random.default_rng(0).standard_normal((37, 2)))
        assert abs(stats.n_frames - 37) < 1e-6
        assert np.all(np.isfinite(stats.F))

    def test_frame_at_mean(self):
        ubm = _separated_ubm()
        stats = bw_stats(ubm, ubm.means[1:2])
        np.testing.assert_allclose(stats.N, [0.0, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(stats.F, 0.0, atol=1e-12)

    def test_centered_first_order(self):
        ubm = DiagGmm(np.array([1.0]), np.array([[2.0, -1.0]]), np.ones((1, 2)))
        X = np.array([[3.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(bw_stats(ubm, X).F, [[0.0, 3.0]])


class TestExtraction:
    def test_zero_stats(self):
        tv, _ = _random_tv(0)
        w = extract_ivector(tv, BwStats(np.zeros(2), np.zeros((2, 2))))
        np.testing.assert_array_equal(w, 0.0)

    def test_zero_T(self):
        tv, rng = _random_tv(1)
        tv.T[...] = 0.0
        w = extract_ivector(tv, BwStats(rng.uniform(1, 5, 2), rng.standard_normal((2, 2))))
        np.testing.assert_array_equal(w, 0.0)

    def test_hand_instance(self):
        tv, rng = _random_tv(2)
        N, F = np.array([3.0, 1.5]), rng.standard_normal((2, 2))
        w = extract_ivector(tv, BwStats(N, F))
        assert np.max(np.abs(w - dense_ivector(tv.T, tv.ubm.variances, N, F))) < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
    def test_dense_oracle(self, seed, K, D, R):
        if R >= K * D:
            R = K * D - 1 or 1
        tv, rng = _random_tv(seed, K, D, R)
        N, F = rng.uniform(0, 20, K), rng.standard_normal((K, D)) * 3
        w = extract_ivector(tv, BwStats(N, F))
        assert np.max(np.abs(w - dense_ivector(tv.T, tv.ubm.variances, N, F))) < 1e-9

    def test_batch_matches_single(self):
        tv, rng = _random_tv(3, 3, 2, 2)
        stats = [BwStats(rng.uniform(0, 4, 3), rng.standard_normal((3, 2))) for _ in range(4)]
        batch = extract_ivector(tv, stats)
        for row, s in zip(batch, stats):
            np.testing.assert_allclose(row, extract_ivector(tv, s), atol=1e-14)


class TestTMatrix:
    def test_zero_init_is_fixed_point(self):
        ubm, _, stats = tv_generative_data(0, n_utts=20)
        tv = train_tmatrix(stats, ubm, R=2, iters=2, init_scale=0.0)
        np.testing.assert_array_equal(extract_ivector(tv, stats), 0.0)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_subspace_recovery(self, seed):
        ubm, t_true, stats = tv_generative_data(seed)
        history = []
        tv = train_tmatrix(stats, ubm, R=2, iters=20, seed=seed, history=history)
        assert np.degrees(subspace_angles(tv.T, t_true)).max() < 5.0
        h = np.array(history)
        assert np.all(h[1:] >= h[:-1] - 1e-8 * np.abs(h[:-1]))

    def test_rank_too_large(self):
        ubm, _, stats = tv_generative_data(0, n_utts=5)
        with pytest.raises(ConfigError):
            train_tmatrix(stats, ubm, R=16)

    def test_deterministic(self):
        ubm, _, stats = tv_generative_data(3, n_utts=30)
        a = train_tmatrix(stats, ubm, R=2, iters=3, seed=4)
        b = train_tmatrix(stats, ubm, R=2, iters=3, seed=4)
        np.testing.assert_array_equal(a.T, b.T)


class TestEnroll:
    def test_single_session(self):
        v = np.array([3.0, 4.0])
        np.testing.assert_allclose(enroll_speaker([v]), [0.6, 0.8], rtol=1e-15)

    def test_antipodal(self):
        with pytest.raises(DegenerateInputError):
            enroll_speaker([[1.0, -2.0], [-1.0, 2.0]])

    def test_three_sessions(self):
        V = np.random.default_rng(0).standard_normal((3, 5))
        mean = (V[0] + V[1] + V[2]) / 3
        np.testing.assert_allclose(enroll_speaker(V), mean / np.linalg.norm(mean), atol=1e-15)

    def test_length_normalize_zero(self):
        with pytest.raises(DegenerateInputError):
            length_normalize(np.zeros(3))


class TestPldaTrain:
    def test_recovery(self):
        X, labels, B, W = plda_generative_data(0)
        history = []
        model = plda_train(X, labels, iters=20, history=history)
        assert _relative(model.B, B) < 0.15
        assert _relative(model.W, W) < 0.15
        h = np.array(history)
        assert len(h) == 21
        assert np.all(h[1:] >= h[:-1] - 1e-8 * np.abs(h[:-1]))

    def test_zero_within_class_scatter(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal((50, 3)) * [1.0, 2.0, 0.5]
        X = np.repeat(y, 3, axis=0)
        labels = np.repeat(np.arange(50), 3)
        model = plda_train(X, labels, iters=10)
        total = np.cov(X.T, bias=True)
        assert np.linalg.eigvalsh(model.W).max() < 1e-3 * np.trace(total)
        assert _relative(model.B, total) < 0.05

    def test_too_few_classes(self):
        with pytest.raises(ConfigError):
            plda_train(np.zeros((3, 2)), [0, 0, 1])

    def test_singletons_tolerated(self):
        X, labels, _, _ = plda_generative_data(2, n_classes=50, per_class=3)
        X = np.vstack([X, np.ones((1, 4))])
        labels = np.append(labels, 999)
        assert plda_train(X, labels, iters=3).check()


def _plda(seed, R=3):
    rng = np.random.default_rng(seed)
    A, C = rng.standard_normal((R, R)), rng.standard_normal((R, R))
    return PldaModel(rng.standard_normal(R), A @ A.T, C @ C.T + 0.1 * np.eye(R)), rng


class TestPldaScore:
    def test_symmetric(self):
        model, rng = _plda(0)
        e, t = rng.standard_normal(3), rng.standard_normal(3)
        assert plda_score(model, e, t) == pytest.approx(plda_score(model, t, e), abs=1e-12)

    def test_no_between_class(self):
        model, rng = _plda(1)
        model.B = np.zeros((3, 3))
        np.testing.assert_allclose(plda_score(model, rng.standard_normal((5, 3)),
                                              rng.standard_normal((5, 3))), 0.0, atol=1e-12)

    def test_scalar_oracle(self):
        b, w, mu = 2.0, 0.5, 0.3
        model = PldaModel(np.array([mu]), np.array([[b]]), np.array([[w]]))
        e, t = 1.1, -0.4
        joint = np.array([[b + w, b], [b, b + w]])
        expected = (gaussian_logpdf(np.array([e - mu, t - mu]), joint)
                    - gaussian_logpdf(e - mu, b + w) - gaussian_logpdf(t - mu, b + w))
        assert abs(plda_score(model, [e], [t]) - expected) < 1e-9

    def test_same_vector_beats_distant(self):
        model, rng = _plda(2)
        e = rng.standard_normal(3)
        assert plda_score(model, e, e) > plda_score(model, e, -3 * e)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rotation_invariance(self, seed):
        model, rng = _plda(seed)
        Q = ortho_group.rvs(3, random_state=seed)
        e, t = rng.standard_normal(3), rng.standard_normal(3)
        rotated = PldaModel(Q @ model.mu, Q @ model.B @ Q.T, Q @ model.W @ Q.T)
        assert plda_score(rotated, Q @ e, Q @ t) == pytest.approx(plda_score(model, e, t),
                                                                  rel=1e-9, abs=1e-9)

    def test_dim_mismatch(self):
        model, _ = _plda(3)
        with pytest.raises(ValueError):
            plda_score(model, np.zeros(2), np.zeros(3))

    def test_not_psd(self):
        model, _ = _plda(4)
        model.B = -np.eye(3)
        with pytest.raises(DegenerateInputError):
            plda_score(model, np.zeros(3), np.zeros(3))


class TestFiles:
    def test_tv_round_trip(self, tmp_path):
        tv, _ = _random_tv(5, 3, 2, 2)
        save_tv(tmp_path / "t.bnt", tv)
        back = load_tv(tmp_path / "t.bnt")
        np.testing.assert_array_equal(back.T, tv.T)
        np.testing.assert_array_equal(back.ubm.variances, tv.ubm.variances)

    @pytest.mark.parametrize("center", [None, np.array([0.5, -1.0, 2.0])])
    def test_plda_round_trip(self, tmp_path, center):
        model, _ = _plda(6)
        model.center = center
        save_plda(tmp_path / "p.bnpl", model)
        back = load_plda(tmp_path / "p.bnpl")
        for name in ("mu", "B", "W"):
            np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
        assert (back.center is None) == (center is None)

    def test_plda_invalid_rejected(self, tmp_path):
        model, _ = _plda(7)
        model.B = -np.eye(3)
        save_plda(tmp_path / "p.bnpl", model)
        with pytest.raises(ParseError, match="invalid PLDA"):
            load_plda(tmp_path / "p.bnpl")

    def test_tv_truncated(self, tmp_path):
        tv, _ = _random_tv(8)
        save_tv(tmp_path / "t.bnt", tv)
        data = (tmp_path / "t.bnt").read_bytes()
        (tmp_path / "x.bnt").write_bytes(data[:-8])
        with pytest.raises(ParseError):
            load_tv(tmp_path / "x.bnt")
