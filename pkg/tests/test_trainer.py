import numpy as np
import pytest

from bnsv.errors import ConfigError, EmptyInputError
from bnsv.losses import LossHead
from bnsv.netcore import TrainConfig
from bnsv.targets import splice_context
from bnsv.trainer import (FramePool, build_apc_model, build_dense_model,
                          network_grad_check, train_apc, train_dense)


def _clusters(seed=0, n_classes=3, per=30, dim=4):
    rng = np.random.default_rng(seed)
    centers = 3.0 * rng.standard_normal((n_classes, dim))
    utts = [centers[k] + 0.3 * rng.standard_normal((per, dim)) for k in range(n_classes)]
    return utts, np.repeat(np.arange(n_classes), per)


class TestFramePool:
    def test_matches_splice_context(self):
        rng = np.random.default_rng(0)
        utts = [rng.standard_normal((T, 3)) for T in (4, 1, 7)]
        pool = FramePool.from_utterances(utts, context=5)
        for u, x in enumerate(utts):
            np.testing.assert_array_equal(pool.spliced(pool.utterance_rows(u)),
                                          splice_context(x, 5))

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            FramePool.from_utterances([])


class TestDense:
    @pytest.mark.parametrize("kind", ["ce", "arcface", "triplet_cos"])
    def test_loss_decreases(self, kind):
        utts, labels = _clusters()
        pool = FramePool.from_utterances(utts, context=1)
        head = LossHead.create(kind, 3, embed_dim=4, seed=0, s=8.0)
        model = build_dense_model(4, [16, 16], "gelu", head, seed=0, context=1)
        cfg = TrainConfig(batch_size=30, learning_rate=0.01, epochs=15)
        _, history = train_dense(model, pool, np.arange(90), labels, cfg)
        assert history.epoch_loss[-1] < 0.5 * history.epoch_loss[0]

    def test_ce_learns_clusters(self):
        utts, labels = _clusters(1)
        pool = FramePool.from_utterances(utts, context=1)
        model = build_dense_model(4, [16], "relu", LossHead.create("ce", 3), seed=1, context=1)
        _, history = train_dense(model, pool, np.arange(90), labels,
                                 TrainConfig(batch_size=16, learning_rate=0.01, epochs=10))
        assert history.epoch_accuracy[-1] == 1.0

    def test_same_seed_same_model(self):
        utts, labels = _clusters(2)
        pool = FramePool.from_utterances(utts, context=3)
        cfg = TrainConfig(batch_size=8, epochs=2)
        models = []
        for _ in range(2):
            m = build_dense_model(12, [8], "sigmoid", LossHead.create("focal", 3), seed=5, context=3)
            train_dense(m, pool, np.arange(90), labels, cfg)
            models.append(m)
        for a, b in zip(models[0].params(), models[1].params()):
            np.testing.assert_array_equal(a, b)

    def test_misaligned_labels(self):
        utts, _ = _clusters()
        pool = FramePool.from_utterances(utts, context=1)
        model = build_dense_model(4, [4], "relu", LossHead.create("ce", 3), context=1)
        with pytest.raises(ValueError):
            train_dense(model, pool, np.arange(5), np.zeros(4, int), TrainConfig())


class TestApc:
    def test_loss_decreases(self):
        t = np.linspace(0, 6 * np.pi, 40)
        utts = [np.column_stack([np.sin(t + p), np.cos(2 * t + p)]) for p in np.linspace(0, 1, 6)]
        model = build_apc_model(2, 8, 2, "tanh", seed=0)
        _, history = train_apc(model, utts, TrainConfig(batch_size=3, learning_rate=0.01,
                                                        epochs=20), t_n=2)
        assert history.epoch_loss[-1] < 0.6 * history.epoch_loss[0]

    def test_needs_gru(self):
        model = build_dense_model(2, [3], "relu", LossHead.create("ce", 2))
        with pytest.raises(ConfigError):
            train_apc(model, [np.zeros((10, 2))], TrainConfig())

    def test_all_too_short(self):
        with pytest.raises(EmptyInputError):
            train_apc(build_apc_model(2, 3), [np.zeros((4, 2))], TrainConfig(), t_n=5)


class TestNetworkGradCheck:
    def test_apc_instance(self):
        report = network_grad_check("l1_apc", "tanh", seed=0, in_dim=8, hidden=(8,))
        assert report.passed and report.n_checked > 0

    @pytest.mark.parametrize("kind", ["ce", "l1_apc", "triplet_euc"])
    def test_relu_kinks_avoided(self, kind):
        for seed in range(3):
            assert network_grad_check(kind, "relu", seed=seed).passed
