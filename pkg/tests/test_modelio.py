import struct

import numpy as np
import pytest

from bnsv.errors import ParseError
from bnsv.losses import LOSS_KINDS, LossHead
from bnsv.modelio import load_model, model_bytes, model_from_bytes, save_model
from bnsv.netcore import TrainConfig, gru_forward
from bnsv.trainer import FramePool, build_apc_model, build_dense_model, train_dense


def _trained_dense(kind="ce", seed=0):
    rng = np.random.default_rng(seed)
    utts = [rng.standard_normal((12, 3)) + k for k in range(4)]
    pool = FramePool.from_utterances(utts, context=3)
    labels = np.repeat(np.arange(4), 12)
    head = LossHead.create(kind, 4, embed_dim=5, seed=seed)
    model = build_dense_model(9, [8] * 6, "gelu", head, seed=seed, context=3)
    train_dense(model, pool, np.arange(48), labels, TrainConfig(batch_size=16, epochs=2))
    return model, pool


class TestRoundTrip:
    def test_trained_dense_bit_exact(self, tmp_path):
        model, pool = _trained_dense()
        save_model(tmp_path / "m.bnm", model)
        back = load_model(tmp_path / "m.bnm")
        x = pool.spliced(np.arange(10))
        assert back.net(x).tobytes() == model.net(x).tobytes()
        assert model_bytes(back) == (tmp_path / "m.bnm").read_bytes()
        assert back.context == 3 and back.scheme == "speaker"

    @pytest.mark.parametrize("kind", [k for k in LOSS_KINDS if k != "l1_apc"])
    def test_every_head(self, kind):
        model = build_dense_model(4, [3], "relu", LossHead.create(kind, 3, embed_dim=4, seed=1))
        back = model_from_bytes(model_bytes(model))
        assert back.head.kind == kind
        for a, b in zip(back.params(), model.params()):
            np.testing.assert_array_equal(a, b)
        assert model_bytes(back) == model_bytes(model)

    def test_gru(self):
        model = build_apc_model(4, 6, 3, "relu", seed=2)
        back = model_from_bytes(model_bytes(model))
        assert back.is_recurrent and back.hidden_layers == 3 and back.net.activation == "relu"
        x = np.random.default_rng(0).standard_normal((1, 5, 4))
        assert gru_forward(back.net, x).outputs.tobytes() == gru_forward(model.net, x).outputs.tobytes()


class TestCorruption:
    def _bytes(self):
        return model_bytes(build_dense_model(3, [2], "tanh", LossHead.create("ce", 2)))

    def test_version(self):
        data = bytearray(self._bytes())
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(ParseError, match="version 99") as info:
            model_from_bytes(bytes(data))
        assert info.value.offset == 4

    def test_magic(self):
        with pytest.raises(ParseError) as info:
            model_from_bytes(b"BNG1" + self._bytes()[4:])
        assert info.value.offset == 0

    def test_truncated(self):
        data = self._bytes()
        for cut in (3, 10, len(data) // 2, len(data) - 1):
            with pytest.raises(ParseError):
                model_from_bytes(data[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ParseError):
            model_from_bytes(self._bytes() + b"\0")

    def test_bad_activation_tag(self):
        data = bytearray(self._bytes())
        # magic, version, body, scheme, context, layer count, in, out -> activation
        data[4 + 4 + 1 + 1 + 4 + 4 + 4 + 4] = 200
        with pytest.raises(ParseError, match="activation"):
            model_from_bytes(bytes(data))
