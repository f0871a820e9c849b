import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnsv.errors import ConfigError
from bnsv.targets import (CorpusManifest, ManifestEntry, center_frames, label_speaker, label_stcl,
                          label_utcl, make_apc_pairs, splice_context, stcl_labels)


def _manifest(speakers):
    return CorpusManifest(ManifestEntry(f"u{i}", s, "p0", f"f{i}.bnf")
                          for i, s in enumerate(speakers))


class TestSplice:
    def test_width(self):
        assert splice_context(np.zeros((4, 57)), 11).shape == (4, 627)

    def test_context_one_is_identity(self):
        x = np.random.default_rng(0).standard_normal((6, 3))
        np.testing.assert_array_equal(splice_context(x, 1), x)

    def test_single_frame_replicated(self):
        x = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(splice_context(x, 11), np.tile(x, 11))

    def test_neighbours(self):
        x = np.arange(5.0)[:, None]
        np.testing.assert_array_equal(splice_context(x, 3),
                                      [[0, 0, 1], [0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 4]])

    @given(st.integers(1, 12), st.integers(1, 4), st.sampled_from([1, 3, 5, 11]))
    def test_center_inverts(self, T, D, C):
        x = np.arange(T * D, dtype=float).reshape(T, D)
        np.testing.assert_array_equal(center_frames(splice_context(x, C), D, C), x)

    @pytest.mark.parametrize("C", [0, 2, 10])
    def test_even_context_rejected(self, C):
        with pytest.raises(ConfigError):
            splice_context(np.zeros((3, 2)), C)


class TestSpeakerLabels:
    def test_two_speakers(self):
        labels, mapping = label_speaker(_manifest(["b", "a", "b"]))
        assert mapping == {"a": 0, "b": 1}
        assert labels == {"u0": 1, "u1": 0, "u2": 1}

    def test_class_count(self):
        _, mapping = label_speaker(_manifest([f"s{i:03d}" for i in range(300)]))
        assert len(mapping) == 300

    def test_shuffle_invariant(self):
        spk = [f"s{i}" for i in range(10)] * 2
        _, m1 = label_speaker(_manifest(spk))
        _, m2 = label_speaker(_manifest(list(reversed(spk))))
        assert m1 == m2

    def test_single_speaker_rejected(self):
        with pytest.raises(ConfigError):
            label_speaker(_manifest(["a", "a"]))


class TestTcl:
    def test_utcl_sixty_frames(self):
        np.testing.assert_array_equal(label_utcl(60, 10), np.repeat(np.arange(10), 6))

    def test_utcl_minimal(self):
        np.testing.assert_array_equal(label_utcl(10, 10), np.arange(10))

    def test_utcl_short_skipped(self):
        assert label_utcl(9, 10) is None

    @given(st.integers(1, 30), st.integers(0, 300))
    def test_utcl_monotone_and_balanced(self, c, extra):
        lab = label_utcl(c + extra, c)
        assert np.all(np.diff(lab) >= 0)
        counts = np.bincount(lab, minlength=c)
        assert counts.max() - counts.min() <= 1

    def test_stcl_chunks(self):
        lab = stcl_labels(61, 10, 6)
        assert lab[:6].tolist() == [0] * 6
        assert lab[54:60].tolist() == [9] * 6
        assert lab[60] == 0

    def test_stcl_single_cycle(self):
        np.testing.assert_array_equal(np.bincount(stcl_labels(60, 10, 6)), [6] * 10)

    def test_stcl_seeded_order(self):
        utts = [np.full((7, 1), i) for i in range(9)]
        s1, l1, o1 = label_stcl(utts, 10, 6, seed=3)
        s2, l2, o2 = label_stcl(utts, 10, 6, seed=3)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(o1, o2)
        # labels do not reset at utterance boundaries
        np.testing.assert_array_equal(l1, stcl_labels(63, 10, 6))

    def test_stcl_too_short(self):
        with pytest.raises(ConfigError):
            label_stcl([np.zeros((5, 1))], 10, 6)


class TestApcPairs:
    def test_index_arithmetic(self):
        x = np.arange(10.0)[:, None]
        inp, tgt = make_apc_pairs(x, 5)
        assert len(inp) == len(tgt) == 5
        assert (inp[0, 0], tgt[0, 0]) == (0.0, 5.0)

    def test_constant_sequence(self):
        inp, tgt = make_apc_pairs(np.ones((8, 3)), 5)
        np.testing.assert_array_equal(inp, tgt)

    def test_short_sequence_skipped(self):
        assert make_apc_pairs(np.ones((5, 2)), 5) is None


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = _manifest(["a", "b"])
        m.write(tmp_path / "m.tsv")
        assert CorpusManifest.read(tmp_path / "m.tsv") == m

    def test_malformed(self, tmp_path):
        (tmp_path / "m.tsv").write_text("u1\ta\tp0\n")
        with pytest.raises(ConfigError, match="m.tsv:1"):
            CorpusManifest.read(tmp_path / "m.tsv")
