"""Training inputs and targets: context splicing, speaker labels, TCL labels, APC pairs."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SCHEMES = ("speaker", "utcl", "stcl", "apc")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    phrase_id: str
    path: str


class CorpusManifest(list):
    """Ordered list of ManifestEntry records (one per utterance)."""

    @classmethod
    def read(cls, path):
        path = Path(path)
        entries = cls()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4 or not all(fields[:3]):
                raise ConfigError(f"{path}:{lineno}: expected 4 tab-separated non-empty fields")
            entries.append(ManifestEntry(*fields))
        return entries

    def write(self, path):
        lines = [f"{e.utterance_id}\t{e.speaker_id}\t{e.phrase_id}\t{e.path}\n" for e in self]
        Path(path).write_text("".join(lines), encoding="utf-8")

    def resolve(self, base):
        """Make relative paths absolute against ``base``."""
        base = Path(base)
        return CorpusManifest(
            ManifestEntry(e.utterance_id, e.speaker_id, e.phrase_id,
                          str(p if (p := Path(e.path)).is_absolute() else base / p))
            for e in self
        )

    def speakers(self):
        return sorted({e.speaker_id for e in self})


@dataclass
class SplicedBatch:
    inputs: np.ndarray
    targets: np.ndarray
    scheme: str


def splice_context(frames, context=11):
    """Stack each frame with its neighbours, replicating edge frames.

    Row ``t`` is frames ``t-C//2 .. t+C//2`` concatenated, so the result is
    ``T x (C*D)``.
    """
    if context < 1 or context % 2 == 0:
        raise ConfigError("context must be odd and >= 1")
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    T, D = frames.shape
    if T == 0:
        return np.zeros((0, context * D))
    return frames[context_index(T, context)].reshape(T, context * D)


def context_index(T, context):
    """(T, C) row indices into a T-frame utterance with edge clamping."""
    half = context // 2
    return np.clip(np.arange(T)[:, None] + np.arange(-half, half + 1)[None, :], 0, T - 1)


def center_frames(spliced, dim, context):
    """Inverse of splice_context: the middle D columns."""
    half = context // 2
    return spliced[:, half * dim:(half + 1) * dim]


def speaker_index(manifest):
    speakers = manifest.speakers()
    if len(speakers) < 2:
        raise ConfigError("speaker targets need at least two speakers")
    return {spk: i for i, spk in enumerate(speakers)}


def label_speaker(manifest):
    """Class index per utterance, speakers numbered in sorted id order.

    Every frame of an utterance carries its utterance's label.

    Returns:
        (labels, mapping): ``labels`` maps utterance id -> class index.
    """
    mapping = speaker_index(manifest)
    return {e.utterance_id: mapping[e.speaker_id] for e in manifest}, mapping


def label_utcl(T, c=10):
    """Uniform per-utterance segmentation into ``c`` classes.

    The first ``T mod c`` segments take one extra frame. Returns None (and
    logs a warning) when the utterance has fewer than ``c`` frames.
    """
    if T < c:
        log.warning("utterance with %d frames skipped for uTCL (c=%d)", T, c)
        return None
    base, extra = divmod(T, c)
    sizes = np.full(c, base)
    sizes[:extra] += 1
    return np.repeat(np.arange(c), sizes)


def label_stcl(utterances, c=10, M=6, seed=0):
    """Shuffle utterances, concatenate, and label consecutive M-frame chunks.

    Labels cycle 0..c-1 by stream position and do not reset at utterance
    boundaries.

    Args:
        utterances: sequence of per-utterance arrays (any row payload, e.g.
            spliced inputs).

    Returns:
        (stream, labels, order) where ``order`` is the utterance permutation.
    """
    order = np.random.default_rng(seed).permutation(len(utterances))
    stream = np.concatenate([np.asarray(utterances[i]) for i in order], axis=0)
    if stream.shape[0] < c * M:
        raise ConfigError(f"sTCL stream has {stream.shape[0]} frames, needs >= c*M = {c * M}")
    labels = stcl_labels(stream.shape[0], c, M)
    return stream, labels, order


def stcl_labels(n_frames, c=10, M=6):
    return (np.arange(n_frames) // M) % c


def make_apc_pairs(frames, t_n=5):
    """Inputs ``x_0..x_{T-t_n-1}`` paired with targets ``x_{t_n}..x_{T-1}``.

    Returns None (with a warning) when ``T <= t_n``.
    """
    if t_n < 1:
        raise ConfigError("t_n must be >= 1")
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    T = frames.shape[0]
    if T <= t_n:
        log.warning("utterance with %d frames skipped for APC (t_n=%d)", T, t_n)
        return None
    return frames[:T - t_n], frames[t_n:]
