"""Experiment configuration: one-level INI sections, validated as a whole.

Relative paths in ``[corpus]`` resolve against the config file's directory.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LOSS_KINDS
from .netcore import ACTIVATIONS
from .targets import SCHEMES

BACKENDS = ("gmm-ubm", "ivector-plda")


@dataclass
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0


@dataclass
class CorpusSection:
    train_manifest: str = "train.tsv"
    eval_manifest: str = "eval.tsv"
    enroll: str = "enroll.tsv"
    trials: str = "trials.tsv"


@dataclass
class FrontendSection:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 26
    n_ceps: int = 19
    n_fft: int = 0            # 0 = next power of two above the window
    vad_aggressiveness: float = 0.4
    rasta: bool = False


@dataclass
class TargetsSection:
    scheme: str = "speaker"
    context: int = 11
    c: int = 10
    M: int = 6
    t_n: int = 5


@dataclass
class NetworkSection:
    hidden_layers: int = 4
    width: int = 128
    activation: str = "gelu"
    gru_layers: int = 3
    gru_width: int = 128


@dataclass
class LossSection:
    kind: str = "ce"
    embed_dim: int = 128
    lam: float = 0.003
    gamma: float = 2.0
    s: float = 64.0
    m: float = 0.5
    tau: float = 0.5
    margin: float = 0.2
    center_alpha: float = 0.5


@dataclass
class TrainSection:
    batch_size: int = 256
    learning_rate: float = 0.001
    epochs: int = 5
    l2_penalty: float = 0.0001
    optimizer: str = "adam"


@dataclass
class BottleneckSection:
    features: str = "bn"      # bn | raw (skip the network, baseline system)
    layers: str = "2"         # one layer or a comma list, e.g. "1,3"
    pca_dim: int = 57

    @property
    def layer_list(self):
        return [int(v) for v in self.layers.split(",") if v.strip()]


@dataclass
class BackendSection:
    kind: str = "gmm-ubm"
    ubm_components: int = 64
    ubm_iters: int = 20
    ubm_subsample: int = 20000
    relevance: float = 10.0
    map_iters: int = 3
    map_posteriors: str = "adapted"
    ivector_dim: int = 100
    tv_iters: int = 10
    plda_iters: int = 20


@dataclass
class EvalSection:
    c_miss: float = 10.0
    c_fa: float = 1.0
    p_target: float = 0.01


@dataclass
class FuseSection:
    systems: str = ""         # comma list of score files
    weights: str = ""         # comma list, empty = equal weights

    @property
    def system_list(self):
        return [v.strip() for v in self.systems.split(",") if v.strip()]

    @property
    def weight_list(self):
        vals = [v.strip() for v in self.weights.split(",") if v.strip()]
        return [float(v) for v in vals] or None


SECTIONS = {
    "experiment": ExperimentSection, "corpus": CorpusSection, "frontend": FrontendSection,
    "targets": TargetsSection, "network": NetworkSection, "loss": LossSection,
    "train": TrainSection, "bottleneck": BottleneckSection, "backend": BackendSection,
    "eval": EvalSection, "fuse": FuseSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    targets: TargetsSection = field(default_factory=TargetsSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    bottleneck: BottleneckSection = field(default_factory=BottleneckSection)
    backend: BackendSection = field(default_factory=BackendSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fuse: FuseSection = field(default_factory=FuseSection)
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def seed(self):
        return self.experiment.seed

    def path(self, name):
        p = Path(getattr(self.corpus, name))
        return p if p.is_absolute() else self.base_dir / p

    def section_text(self, *names, fmt=repr):
        """Canonical ``[section] key = value`` text; with the default ``repr``
        formatting it is the provenance-hash input."""
        lines = []
        for name in names:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(SECTIONS[name]):
                lines.append(f"{f.name} = {fmt(getattr(getattr(self, name), f.name))}")
        return "\n".join(lines) + "\n"

    def to_ini(self):
        return self.section_text(*SECTIONS, fmt=str)

    def validate(self):
        t, n, lo, b, bn = self.targets, self.network, self.loss, self.backend, self.bottleneck
        if t.scheme not in SCHEMES:
            raise ConfigError(f"targets.scheme must be one of {SCHEMES}")
        if t.context < 1 or t.context % 2 == 0:
            raise ConfigError("targets.context must be odd and >= 1")
        if t.c < 2 or t.M < 1 or t.t_n < 1:
            raise ConfigError("targets.c >= 2, targets.M >= 1 and targets.t_n >= 1 required")
        if n.activation not in ACTIVATIONS:
            raise ConfigError(f"network.activation must be one of {ACTIVATIONS}")
        if lo.kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}")
        if (t.scheme == "apc") != (lo.kind == "l1_apc"):
            raise ConfigError("the apc scheme goes with loss.kind = l1_apc (and only it)")
        if t.scheme == "apc" and t.context != 1:
            raise ConfigError("apc trains a GRU on unspliced frames; set targets.context = 1")
        if min(n.hidden_layers, n.width, n.gru_layers, n.gru_width, lo.embed_dim) < 1:
            raise ConfigError("network sizes must be positive")
        if not 0.0 <= lo.gamma <= 5.0 or not 0.0 <= lo.m < 3.141592653589793:
            raise ConfigError("loss.gamma in [0, 5] and loss.m in [0, pi) required")
        if lo.s <= 0 or lo.tau <= 0 or lo.lam < 0 or lo.margin < 0:
            raise ConfigError("loss.s and loss.tau must be positive, lam and margin >= 0")
        tr = self.train
        if tr.batch_size < 1 or tr.learning_rate <= 0 or tr.epochs < 1 or tr.l2_penalty < 0:
            raise ConfigError("invalid [train] values")
        if tr.optimizer not in ("sgd", "adam"):
            raise ConfigError("train.optimizer must be sgd or adam")
        if bn.features not in ("bn", "raw"):
            raise ConfigError("bottleneck.features must be bn or raw")
        layers = bn.layer_list
        depth = n.gru_layers if t.scheme == "apc" else n.hidden_layers
        if bn.features == "bn" and (not layers or min(layers) < 1 or max(layers) > depth):
            raise ConfigError(f"bottleneck.layers must lie in 1..{depth}")
        if bn.pca_dim < 1:
            raise ConfigError("bottleneck.pca_dim must be positive")
        if b.kind not in BACKENDS:
            raise ConfigError(f"backend.kind must be one of {BACKENDS}")
        if b.ubm_components < 1 or b.relevance <= 0 or b.map_iters < 1 or b.ubm_iters < 0:
            raise ConfigError("invalid GMM-UBM settings")
        if b.map_posteriors not in ("adapted", "ubm"):
            raise ConfigError("backend.map_posteriors must be adapted or ubm")
        if b.ivector_dim < 1 or b.tv_iters < 0 or b.plda_iters < 0:
            raise ConfigError("invalid i-vector settings")
        e = self.eval
        if e.c_miss <= 0 or e.c_fa <= 0 or not 0.0 < e.p_target < 1.0:
            raise ConfigError("eval costs must be positive and p_target in (0, 1)")
        weights = self.fuse.weight_list
        if weights is not None and len(weights) != len(self.fuse.system_list):
            raise ConfigError("fuse.weights needs one weight per system")
        if self.frontend.rasta:
            raise ConfigError("RASTA filtering is not implemented")
        return self


def _convert(raw, typ, where):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ.__name__}") from exc


def parse_config(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig(base_dir=Path(base_dir))
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(cfg, name)
        types = {f.name: f.type for f in dataclasses.fields(section)}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            typ = {"int": int, "float": float, "str": str, "bool": bool}[
                types[key] if isinstance(types[key], str) else types[key].__name__]
            setattr(section, key, _convert(raw, typ, f"[{name}] {key}"))
    return cfg.validate()


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent.resolve())
