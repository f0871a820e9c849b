"""Trials, EER / minDCF, score fusion and DET export.

Decision rule everywhere: accept iff ``score >= threshold``. Error rates
are fractions in [0, 1]; reports print EER in percent and minDCF x 100.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyInputError

TRIAL_LABELS = ("genuine", "target_wrong", "imposter_correct", "imposter_wrong")
NONTARGET_TYPES = TRIAL_LABELS[1:]
SHORT_NAMES = {"target_wrong": "TW", "imposter_correct": "IC", "imposter_wrong": "IW"}


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    label: str
    _score: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in TRIAL_LABELS:
            raise ConfigError(f"unknown trial label {self.label!r}")

    @property
    def key(self):
        return (self.enroll_id, self.test_id)

    @property
    def score(self):
        return self._score

    @score.setter
    def score(self, value):
        if self._score is not None:
            raise ValueError(f"score of trial {self.key} already set")
        self._score = float(value)


def read_trials(path):
    trials = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ConfigError(f"{path}:{lineno}: expected enroll_id, test_id, label")
        trials.append(Trial(*fields))
    return trials


def write_trials(path, trials):
    Path(path).write_text("".join(f"{t.enroll_id}\t{t.test_id}\t{t.label}\n" for t in trials),
                          encoding="utf-8")


def write_scores(path, scores):
    """``scores`` maps (enroll_id, test_id) -> float; written in repr form so
    the round trip is exact."""
    lines = [f"{e}\t{t}\t{float(s)!r}\n" for (e, t), s in scores.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_scores(path):
    scores = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ConfigError(f"{path}:{lineno}: expected enroll_id, test_id, score")
        scores[(fields[0], fields[1])] = float(fields[2])
    return scores


def _validate(genuine, impostor):
    g = np.asarray(genuine, dtype=np.float64).ravel()
    i = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise EmptyInputError("need at least one genuine and one impostor score")
    return g, i


def error_rates(genuine, impostor, thresholds):
    """(FRR, FAR) at each threshold: FRR = P(genuine < t), FAR = P(impostor >= t)."""
    g = np.sort(genuine)
    i = np.sort(impostor)
    frr = np.searchsorted(g, thresholds, side="left") / g.size
    far = (i.size - np.searchsorted(i, thresholds, side="left")) / i.size
    return frr, far


def compute_eer(genuine, impostor):
    """Equal error rate over all distinct observed scores as thresholds.

    Picks the threshold minimising |FAR - FRR| (lowest threshold on ties) and
    returns ``((FAR + FRR) / 2, threshold)``.
    """
    g, i = _validate(genuine, impostor)
    thresholds = np.unique(np.concatenate([g, i]))
    frr, far = error_rates(g, i, thresholds)
    k = int(np.argmin(np.abs(far - frr)))
    return float((far[k] + frr[k]) / 2.0), float(thresholds[k])


def compute_mindcf(genuine, impostor, c_miss=10.0, c_fa=1.0, p_target=0.01):
    """Normalised minimum detection cost.

    Thresholds are all distinct scores plus +inf (reject everything). The
    cost is divided by ``min(c_miss * p_target, c_fa * (1 - p_target))``.
    """
    if c_miss <= 0 or c_fa <= 0 or not 0.0 < p_target < 1.0:
        raise ConfigError("costs must be positive and p_target in (0, 1)")
    g, i = _validate(genuine, impostor)
    thresholds = np.append(np.unique(np.concatenate([g, i])), np.inf)
    p_miss, p_fa = error_rates(g, i, thresholds)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    cost /= min(c_miss * p_target, c_fa * (1.0 - p_target))
    k = int(np.argmin(cost))
    return float(cost[k]), float(thresholds[k])


def fuse_scores(systems, weights=None):
    """Per-trial weighted mean of several score dicts (equal weights default)."""
    systems = list(systems)
    if not systems:
        raise ConfigError("nothing to fuse")
    weights = np.ones(len(systems)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.size != len(systems) or weights.sum() <= 0 or np.any(weights < 0):
        raise ConfigError("need one non-negative weight per system with positive sum")
    keys = list(systems[0])
    keyset = set(keys)
    for n, other in enumerate(systems[1:], 1):
        missing = keyset.symmetric_difference(other)
        if missing:
            shown = ", ".join("/".join(k) for k in sorted(missing)[:10])
            raise ConfigError(f"system {n} trial keys differ from system 0: {shown}")
    total = weights.sum()
    return {k: float(sum(w * s[k] for w, s in zip(weights, systems)) / total) for k in keys}


@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    bin_edges: np.ndarray
    genuine_hist: np.ndarray
    impostor_hist: np.ndarray

    def write(self, path):
        lines = ["threshold\tfar\tfrr\n"]
        lines += [f"{t!r}\t{a!r}\t{r!r}\n" for t, a, r in zip(self.thresholds, self.far, self.frr)]
        lines.append("\nbin_lo\tbin_hi\tgenuine\timpostor\n")
        lines += [f"{lo!r}\t{hi!r}\t{g}\t{i}\n" for lo, hi, g, i in
                  zip(self.bin_edges[:-1], self.bin_edges[1:], self.genuine_hist, self.impostor_hist)]
        Path(path).write_text("".join(lines), encoding="utf-8")


def det_export(genuine, impostor, bins=50):
    """One (FAR, FRR) point per distinct score threshold plus score histograms."""
    g, i = _validate(genuine, impostor)
    thresholds = np.unique(np.concatenate([g, i]))
    frr, far = error_rates(g, i, thresholds)
    lo, hi = thresholds[0], thresholds[-1]
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return DetCurve(thresholds, far, frr, edges,
                    np.histogram(g, edges)[0], np.histogram(i, edges)[0])


@dataclass
class MetricReport:
    """Per non-target type EER (%) and minDCF, with their arithmetic means."""
    eer: dict
    mindcf: dict
    eer_threshold: dict
    counts: dict

    @property
    def avg_eer(self):
        return float(np.mean([self.eer[t] for t in NONTARGET_TYPES]))

    @property
    def avg_mindcf(self):
        return float(np.mean([self.mindcf[t] for t in NONTARGET_TYPES]))

    def as_dict(self):
        out = {"trials.genuine": self.counts["genuine"]}
        for t in NONTARGET_TYPES:
            name = SHORT_NAMES[t]
            out[f"trials.{name}"] = self.counts[t]
            out[f"eer.{name}"] = self.eer[t]
            out[f"mindcf.{name}"] = self.mindcf[t]
            out[f"eer_threshold.{name}"] = self.eer_threshold[t]
        out["eer.avg"] = self.avg_eer
        out["mindcf.avg"] = self.avg_mindcf
        return out

    def to_text(self, title=""):
        kv = "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())
        header = f"{'':<10}" + "".join(f"{SHORT_NAMES[t]:>14}" for t in NONTARGET_TYPES) + f"{'Avg':>14}\n"
        row = f"{title[:10]:<10}" + "".join(
            f"{self.eer[t]:>7.2f}/{100 * self.mindcf[t]:<6.2f}" for t in NONTARGET_TYPES)
        row += f"{self.avg_eer:>7.2f}/{100 * self.avg_mindcf:<6.2f}\n"
        return kv + "\n# %EER / minDCF x 100\n" + header + row

    @classmethod
    def parse(cls, text):
        values = {}
        for line in text.splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                values[k.strip()] = float(v)
        return values


def evaluate_trials(trials, c_miss=10.0, c_fa=1.0, p_target=0.01):
    """Genuine trials against each non-target type separately."""
    by_label = {label: [] for label in TRIAL_LABELS}
    for t in trials:
        if t.score is None:
            raise ConfigError(f"trial {t.key} has no score")
        by_label[t.label].append(t.score)
    eer, dcf, thr, counts = {}, {}, {}, {k: len(v) for k, v in by_label.items()}
    for kind in NONTARGET_TYPES:
        if not by_label[kind]:
            eer[kind] = dcf[kind] = thr[kind] = math.nan
            continue
        e, th = compute_eer(by_label["genuine"], by_label[kind])
        eer[kind] = 100.0 * e
        thr[kind] = th
        dcf[kind] = compute_mindcf(by_label["genuine"], by_label[kind], c_miss, c_fa, p_target)[0]
    return MetricReport(eer, dcf, thr, counts)


def attach_scores(trials, scores):
    missing = [t.key for t in trials if t.key not in scores]
    if missing:
        raise ConfigError(f"{len(missing)} trials without a score, e.g. {missing[0]}")
    for t in trials:
        t.score = scores[t.key]
    return trials
