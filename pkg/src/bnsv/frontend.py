"""Acoustic front end: framing, MFCC + deltas, energy VAD and utterance CMVN.

Processing order is fixed: MFCC on all frames, then the VAD mask, then
CMVN over the surviving frames only.
"""

import wave
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from .binio import Reader, Writer
from .errors import ConfigError, EmptyInputError, ParseError

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"BNF1"
FEATURE_KINDS = ("mfcc", "spliced", "bottleneck", "ivector-stat")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample rate must be positive")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    kind: str = "mfcc"
    utterance_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def dim(self):
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]

    def replace(self, frames, **changes):
        values = dict(frame_shift_ms=self.frame_shift_ms, kind=self.kind,
                      utterance_id=self.utterance_id, meta=dict(self.meta))
        values.update(changes)
        return FeatureSequence(frames, **values)


@dataclass
class FrontendConfig:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 26
    n_ceps: int = 19
    n_fft: int | None = None
    vad_aggressiveness: float = 0.4
    # RASTA filtering is not implemented; the flag is kept so configs can name it.
    rasta: bool = False


def _samples_per(ms, sample_rate):
    return int(round(sample_rate * ms / 1000.0))


def frame_signal(clip, window_ms=25.0, shift_ms=10.0):
    """Cut a clip into overlapping Hamming-windowed frames.

    Frame ``t`` covers samples ``[t*shift, t*shift + window)``; a trailing
    partial frame is dropped.

    Returns:
        (T, window) array of windowed frames.
    """
    if not window_ms >= shift_ms > 0:
        raise ConfigError("need window_ms >= shift_ms > 0")
    win = _samples_per(window_ms, clip.sample_rate_hz)
    hop = _samples_per(shift_ms, clip.sample_rate_hz)
    if clip.samples.size < win:
        raise EmptyInputError(
            f"clip {clip.utterance_id!r} has {clip.samples.size} samples, "
            f"shorter than one {win}-sample window"
        )
    frames = sliding_window_view(clip.samples, win)[::hop]
    return frames * np.hamming(win)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular filters equally spaced on the HTK mel scale.

    Returns:
        (weights, centers): an (n_mels, n_fft//2 + 1) weight matrix and the
        center frequency of each filter in Hz.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def _fft_size(window_len, n_fft):
    if n_fft is None:
        return 1 << int(np.ceil(np.log2(window_len)))
    if n_fft < window_len:
        raise ConfigError(f"n_fft={n_fft} smaller than window length {window_len}")
    return n_fft


def power_spectrum(frames, n_fft=None):
    n_fft = _fft_size(frames.shape[1], n_fft)
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft


def log_mel_energies(frames, sample_rate, n_mels=26, n_fft=None):
    n_fft = _fft_size(frames.shape[1], n_fft)
    weights, _ = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = power_spectrum(frames, n_fft) @ weights.T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(feats, width=2):
    """Regression deltas over +-``width`` frames with edge replication."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] == 0:
        return feats.copy()
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    T = feats.shape[0]
    num = np.zeros_like(feats)
    for n in range(1, width + 1):
        num += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def compute_mfcc(frames, sample_rate, n_mels=26, n_ceps=19, n_fft=None,
                 shift_ms=10.0, utterance_id=""):
    """Static cepstra c0..c{n_ceps-1} with appended delta and delta-delta.

    The output dimension is ``3 * n_ceps`` (57 for the default 19).
    """
    if n_ceps > n_mels:
        raise ConfigError(f"n_ceps={n_ceps} exceeds n_mels={n_mels}")
    logmel = log_mel_energies(frames, sample_rate, n_mels, n_fft)
    static = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_ceps]
    d1 = deltas(static)
    d2 = deltas(d1)
    return FeatureSequence(np.hstack([static, d1, d2]), frame_shift_ms=shift_ms,
                           kind="mfcc", utterance_id=utterance_id)


def frame_log_energy(frames):
    return np.log(np.maximum(np.sum(np.asarray(frames) ** 2, axis=1), LOG_FLOOR))


def energy_vad(energies, aggressiveness=0.4):
    """Per-utterance adaptive energy threshold.

    ``energies`` is a 1-D array of frame log-energies, or a FeatureSequence
    whose first coefficient (c0, a scaled mean log filterbank energy) is used.
    A frame is kept iff its log-energy exceeds
    ``floor + aggressiveness * (ceiling - floor)``, with floor and ceiling the
    utterance minimum and maximum. An utterance without dynamic range keeps
    every frame.
    """
    if not 0.0 < aggressiveness < 1.0:
        raise ConfigError("aggressiveness must lie in (0, 1)")
    if isinstance(energies, FeatureSequence):
        energies = energies.frames[:, 0]
    energies = np.asarray(energies, dtype=np.float64).ravel()
    if energies.size == 0:
        raise EmptyInputError("VAD needs at least one frame")
    floor, ceiling = energies.min(), energies.max()
    if ceiling - floor <= 1e-12 * max(1.0, abs(ceiling)):
        return np.ones(energies.size, dtype=bool)
    return energies > floor + aggressiveness * (ceiling - floor)


def cmvn_utterance(seq):
    """Zero mean, unit variance per dimension over the utterance.

    A single frame gets mean removal only; a zero-variance dimension is
    divided by 1.
    """
    x = seq.frames
    if x.shape[0] == 0:
        raise EmptyInputError("CMVN needs at least one frame")
    centered = x - x.mean(axis=0)
    if x.shape[0] > 1:
        std = centered.std(axis=0)
        std[std <= 0.0] = 1.0
        centered = centered / std
    return seq.replace(centered)


def apply_vad(seq, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.size != len(seq):
        raise ValueError(f"mask length {mask.size} != frame count {len(seq)}")
    return seq.replace(seq.frames[mask])


def extract_features(clip, cfg=None):
    """Full front end for one clip: MFCC -> VAD -> CMVN.

    An utterance whose VAD mask is empty comes back as a 0-frame sequence.
    """
    cfg = cfg or FrontendConfig()
    frames = frame_signal(clip, cfg.window_ms, cfg.shift_ms)
    mfcc = compute_mfcc(frames, clip.sample_rate_hz, cfg.n_mels, cfg.n_ceps,
                        cfg.n_fft, cfg.shift_ms, clip.utterance_id)
    mask = energy_vad(frame_log_energy(frames), cfg.vad_aggressiveness)
    voiced = apply_vad(mfcc, mask)
    if len(voiced) == 0:
        return voiced
    return cmvn_utterance(voiced)


def read_wav(path, utterance_id=None):
    """Load 16-bit mono PCM WAV as samples scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit mono PCM")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, utterance_id if utterance_id is not None else str(path))


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def save_features(path, frames):
    if isinstance(frames, FeatureSequence):
        frames = frames.frames
    frames = np.asarray(frames)
    w = Writer(FEATURE_MAGIC)
    w.u32(frames.shape[0])
    w.u32(frames.shape[1])
    w.f32(frames)
    w.save(path)


def load_features(path, kind="mfcc", utterance_id=""):
    r = Reader.from_file(path, FEATURE_MAGIC, "feature file")
    T = r.u32("T")
    D = r.u32("D")
    if D == 0:
        raise ParseError("feature dimension is zero", 8)
    frames = r.f32((T, D), "frames")
    r.finish()
    if not np.all(np.isfinite(frames)):
        raise ParseError("non-finite feature value", 12)
    return FeatureSequence(frames.astype(np.float64), kind=kind, utterance_id=utterance_id)
