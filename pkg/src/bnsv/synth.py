"""Synthetic text-dependent corpus: features, manifests, enrollment and trials.

Each phrase is a fixed sequence of acoustic units. A speaker shifts every
unit mean along a shared low-rank subspace (``mu_u + A_u y_s``), so speaker
identity is a property of the whole voice while phrase identity lives in
the unit sequence. Every (speaker, phrase) pair gets one latent frame
trajectory (unit means plus a fixed frame-level texture). Sessions add a
channel offset, AR(1) noise confined to a high-variance nuisance subspace
and white noise, all scaled by ``noise_scale``. Utterances are
CMVN-normalised like real front-end output.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .frontend import FeatureSequence, cmvn_utterance, save_features
from .metrics import Trial, write_trials
from .targets import CorpusManifest, ManifestEntry

DEFAULT_NOISE = 2.0


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_speakers: int = 20
    n_phrases: int = 5
    sessions: int = 3
    frames: int = 100
    n_background: int = 30
    dim: int = 57
    n_units: int = 24
    units_per_phrase: int = 6
    speaker_rank: int = 16
    speaker_scale: float = 0.6
    phrase_scale: float = 1.5
    nuisance_rank: int = 8
    nuisance_scale: float = 2.0
    texture_scale: float = 0.8
    noise_scale: float = DEFAULT_NOISE
    seed: int = 0

    def __post_init__(self):
        positive = ("n_speakers", "n_phrases", "sessions", "frames", "dim", "n_units",
                    "units_per_phrase", "speaker_rank", "nuisance_rank")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_background < 0:
            raise ConfigError("n_background must be >= 0")
        if self.sessions < 2:
            raise ConfigError("need at least 2 sessions (enrollment plus test)")
        if self.units_per_phrase > self.n_units:
            raise ConfigError("units_per_phrase exceeds the unit inventory")
        if self.frames < 2 * self.units_per_phrase:
            raise ConfigError("utterances too short for the unit sequence")
        for name in ("speaker_scale", "phrase_scale", "nuisance_scale", "texture_scale",
                     "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def n_enroll_sessions(self):
        return self.sessions - 1


@dataclass
class SyntheticCorpus:
    train: CorpusManifest
    eval: CorpusManifest
    enroll: dict          # enroll_id -> [utterance ids]
    trials: list
    features: dict        # utterance id -> (T, D) array (float32-rounded)


class _World:
    """Speaker-independent structure shared by background and eval speakers."""

    def __init__(self, spec, rng):
        D = spec.dim
        self.unit_means = spec.phrase_scale * rng.standard_normal((spec.n_units, D))
        self.loadings = (spec.speaker_scale / np.sqrt(spec.speaker_rank)
                         * rng.standard_normal((spec.n_units, D, spec.speaker_rank)))
        self.nuisance = np.linalg.qr(rng.standard_normal((D, spec.nuisance_rank)))[0]
        self.phrases = [rng.choice(spec.n_units, spec.units_per_phrase, replace=False)
                        for _ in range(spec.n_phrases)]
        weights = rng.uniform(0.6, 1.4, (spec.n_phrases, spec.units_per_phrase))
        self.durations = [_split(spec.frames, w) for w in weights]


def _split(total, weights):
    sizes = np.maximum(2, np.floor(total * weights / weights.sum()).astype(int))
    sizes[-1] += total - sizes.sum()
    return sizes


def _trajectory(spec, world, speaker_factor, phrase, rng):
    """Latent frame sequence of one (speaker, phrase); shared by its sessions."""
    units = world.phrases[phrase]
    means = world.unit_means[units] + np.einsum("udr,r->ud", world.loadings[units], speaker_factor)
    x = np.repeat(means, world.durations[phrase], axis=0)
    x = x + spec.texture_scale * rng.standard_normal(x.shape)
    # 3-tap smoothing so unit boundaries look like transitions
    padded = np.vstack([x[:1], x, x[-1:]])
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def _session(spec, world, x, rng):
    T, D = x.shape
    a = spec.noise_scale
    channel = 0.5 * rng.standard_normal(D)
    z = np.empty((T, spec.nuisance_rank))
    z[0] = rng.standard_normal(spec.nuisance_rank)
    innov = rng.standard_normal((T, spec.nuisance_rank)) * np.sqrt(1 - 0.9 ** 2)
    for t in range(1, T):
        z[t] = 0.9 * z[t - 1] + innov[t]
    white = 0.3 * rng.standard_normal((T, D))
    x = x + a * (channel + spec.nuisance_scale * z @ world.nuisance.T + white)
    return x


def generate(spec):
    """Build the corpus in memory. Every random draw comes from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    groups = (("bg", spec.n_background), ("ev", spec.n_speakers))
    factors = {}
    for g, n in groups:
        y = rng.standard_normal((n, spec.speaker_rank))
        # equal-norm voices: no speaker sits at the population centre
        factors[g] = np.sqrt(spec.speaker_rank) * y / np.linalg.norm(y, axis=1, keepdims=True)
    train, ev, features = CorpusManifest(), CorpusManifest(), {}
    for group, n in groups:
        for s in range(n):
            spk = f"{group}{s:03d}"
            for p in range(spec.n_phrases):
                latent = _trajectory(spec, world, factors[group][s], p, rng)
                for sess in range(spec.sessions):
                    uid = f"{spk}_p{p}_s{sess}"
                    x = _session(spec, world, latent, rng)
                    seq = cmvn_utterance(FeatureSequence(x, utterance_id=uid))
                    features[uid] = seq.frames.astype(np.float32).astype(np.float64)
                    entry = ManifestEntry(uid, spk, f"p{p}", f"features/{uid}.bnf")
                    (train if group == "bg" else ev).append(entry)
    enroll, tests = {}, []
    for e in ev:
        sess = int(e.utterance_id.rsplit("_s", 1)[1])
        if sess < spec.n_enroll_sessions:
            enroll.setdefault(f"{e.speaker_id}_{e.phrase_id}", []).append(e.utterance_id)
        else:
            tests.append(e)
    trials = []
    for eid in enroll:
        spk, phrase = eid.rsplit("_", 1)
        for t in tests:
            same_spk, same_phrase = t.speaker_id == spk, t.phrase_id == phrase
            label = ("genuine" if same_phrase else "target_wrong") if same_spk else \
                ("imposter_correct" if same_phrase else "imposter_wrong")
            trials.append(Trial(eid, t.utterance_id, label))
    return SyntheticCorpus(train, ev, enroll, trials, features)


def write_enroll(path, enroll):
    lines = [f"{eid}\t{uid}\n" for eid, uids in enroll.items() for uid in uids]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_enroll(path):
    enroll = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ConfigError(f"{path}:{lineno}: expected enroll_id, utterance_id")
        enroll.setdefault(fields[0], []).append(fields[1])
    return enroll


def synth_corpus(spec, out_dir):
    """Write features (BNF1), ``train.tsv``, ``eval.tsv``, ``enroll.tsv``,
    ``trials.tsv`` and ``spec.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    corpus = generate(spec)
    for uid, frames in corpus.features.items():
        save_features(out / "features" / f"{uid}.bnf", frames)
    corpus.train.write(out / "train.tsv")
    corpus.eval.write(out / "eval.tsv")
    write_enroll(out / "enroll.tsv", corpus.enroll)
    write_trials(out / "trials.tsv", corpus.trials)
    (out / "spec.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in asdict(spec).items()),
                                  encoding="utf-8")
    return corpus
