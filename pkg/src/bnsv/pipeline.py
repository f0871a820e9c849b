"""Stage runner: artifacts, provenance records and the experiment recipe.

Every stage owns ``<stage-dir>/<stage>/`` and finishes by writing
``provenance.json``: the FNV-1a hash of the config sections it reads, the
digests of its inputs (upstream outputs and, for ``features``, the corpus
files) and the digests of everything it wrote. A stage whose provenance
matches is skipped; a config change refuses to overwrite unless forced.
"""

import hashlib
import json
import logging
import os
import shutil
from pathlib import Path

import numpy as np

from .bottleneck import pca_fit, pca_project, save_pca, tap_layers
from .errors import BnsvError, ConfigError, DependencyError, EmptyInputError
from .frontend import FrontendConfig, extract_features, load_features, read_wav, save_features
from .gmm import load_gmm, map_adapt, save_gmm, ubm_train_em
from .ivector import (PldaScorer, bw_stats, enroll_speaker, extract_ivector, load_plda,
                      load_tv, plda_train, save_plda, save_tv, train_tmatrix)
from .losses import LossHead
from .metrics import (attach_scores, det_export, evaluate_trials, fuse_scores, read_scores,
                      read_trials, write_scores)
from .modelio import load_model, save_model
from .netcore import TrainConfig
from .synth import read_enroll, write_enroll
from .targets import (CorpusManifest, ManifestEntry, label_speaker, label_stcl, label_utcl,
                      splice_context)
from .trainer import (FramePool, build_apc_model, build_dense_model, train_apc, train_dense)

log = logging.getLogger(__name__)

STAGES = ("features", "targets", "train-dnn", "extract-bn", "train-ubm", "train-tv",
          "train-plda", "enroll", "score", "evaluate", "fuse")
DEPENDS = {stage: (STAGES[i - 1],) if i else () for i, stage in enumerate(STAGES)}
STAGE_SECTIONS = {
    "features": ("corpus", "frontend"),
    "targets": ("targets",),
    "train-dnn": ("experiment", "targets", "network", "loss", "train", "bottleneck"),
    "extract-bn": ("bottleneck",),
    "train-ubm": ("experiment", "backend"),
    "train-tv": ("experiment", "backend"),
    "train-plda": ("backend",),
    "enroll": ("backend",),
    "score": ("backend",),
    "evaluate": ("eval",),
    "fuse": ("fuse", "eval"),
}
PROVENANCE = "provenance.json"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(data):
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def file_digest(path):
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()


def topological_order(depends=DEPENDS):
    """Kahn's algorithm; raises on a cycle."""
    indeg = {s: len(d) for s, d in depends.items()}
    users = {s: [t for t, d in depends.items() if s in d] for s in depends}
    ready = [s for s in depends if indeg[s] == 0]
    order = []
    while ready:
        s = ready.pop(0)
        order.append(s)
        for t in users[s]:
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
    if len(order) != len(depends):
        raise ConfigError("stage graph has a cycle")
    return order


class StageLock:
    """Exclusive ownership of a stage directory via an O_EXCL lock file."""

    def __init__(self, stage_dir):
        self.path = Path(stage_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise BnsvError(f"{self.path.parent} is locked by another run "
                            f"(remove {self.path} if that run is dead)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# helpers shared by stages
# ---------------------------------------------------------------------------

def _read_manifest_features(directory, name):
    manifest = CorpusManifest.read(directory / name)
    feats = {e.utterance_id: load_features(directory / e.path, utterance_id=e.utterance_id).frames
             for e in manifest}
    return manifest, feats


def _write_feature_set(out_dir, subdir, manifests, feats):
    (out_dir / subdir).mkdir(parents=True, exist_ok=True)
    for name, manifest in manifests.items():
        entries = CorpusManifest()
        for e in manifest:
            rel = f"{subdir}/{e.utterance_id}.bnf"
            save_features(out_dir / rel, feats[e.utterance_id])
            entries.append(ManifestEntry(e.utterance_id, e.speaker_id, e.phrase_id, rel))
        entries.write(out_dir / name)


def _pool(manifest, feats):
    return np.vstack([feats[e.utterance_id] for e in manifest])


def _write_history(path, values, header):
    Path(path).write_text(header + "\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(values)),
                          encoding="utf-8")


def _skip(out, reason):
    (out / "skipped.txt").write_text(reason + "\n", encoding="utf-8")


class Pipeline:
    def __init__(self, cfg, stage_dir, force=False):
        self.cfg = cfg
        self.root = Path(stage_dir)
        self.force = force

    def dir(self, stage):
        return self.root / stage

    def provenance(self, stage):
        path = self.dir(stage) / PROVENANCE
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def config_hash(self, stage):
        text = self.cfg.section_text(*STAGE_SECTIONS[stage])
        return f"{fnv1a_64(text.encode('utf-8')):016x}"

    def _fusion_inputs(self):
        return [p if (p := Path(s)).is_absolute() else self.cfg.base_dir / p
                for s in self.cfg.fuse.system_list]

    def _external_inputs(self, stage):
        if stage == "fuse":
            return self._fusion_inputs()
        if stage != "features":
            return []
        paths = [self.cfg.path(n) for n in ("train_manifest", "eval_manifest", "enroll", "trials")]
        for key in ("train_manifest", "eval_manifest"):
            manifest_path = self.cfg.path(key)
            if not manifest_path.exists():
                raise DependencyError(f"corpus manifest {manifest_path} does not exist")
            paths += [Path(e.path) for e in CorpusManifest.read(manifest_path).resolve(
                manifest_path.parent)]
        return paths

    def input_digests(self, stage):
        digests = {}
        for dep in DEPENDS[stage]:
            prov = self.provenance(dep)
            if prov is None:
                raise DependencyError(f"stage {stage!r} needs stage {dep!r}; run it first")
            digests[f"stage:{dep}"] = prov["outputs_digest"]
        for p in self._external_inputs(stage):
            if not p.exists():
                raise DependencyError(f"input file {p} does not exist")
            digests[str(p)] = file_digest(p)
        return digests

    def _outputs(self, stage):
        out = self.dir(stage)
        files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != PROVENANCE)
        return {str(p.relative_to(out)): file_digest(p) for p in files}

    def is_current(self, stage):
        prov = self.provenance(stage)
        if prov is None:
            return False
        try:
            return (prov["config_hash"] == self.config_hash(stage)
                    and prov["inputs"] == self.input_digests(stage)
                    and prov["outputs"] == self._outputs(stage))
        except DependencyError:
            return False

    def run(self, stage):
        """Run one stage. Returns ``"ran"`` or ``"skipped"`` (already current)."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        inputs = self.input_digests(stage)
        chash = self.config_hash(stage)
        prov = self.provenance(stage)
        if prov is not None and not self.force:
            if prov["config_hash"] != chash:
                raise ConfigError(
                    f"stage {stage!r} was built with a different config "
                    f"(hash {prov['config_hash']} != {chash}); rerun with --force")
            if prov["inputs"] == inputs and prov["outputs"] == self._outputs(stage):
                log.info("stage %s is up to date", stage)
                return "skipped"
        out = self.dir(stage)
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log.info("running stage %s", stage)
        getattr(self, "_stage_" + stage.replace("-", "_"))(out)
        outputs = self._outputs(stage)
        record = {
            "stage": stage,
            "config_hash": chash,
            "inputs": inputs,
            "outputs": outputs,
            "outputs_digest": f"{fnv1a_64(json.dumps(outputs, sort_keys=True).encode()):016x}",
        }
        (out / PROVENANCE).write_text(json.dumps(record, indent=1, sort_keys=True),
                                      encoding="utf-8")
        return "ran"

    def run_all(self, until=None):
        results = {}
        for stage in topological_order():
            if stage == "fuse" and not self.cfg.fuse.system_list:
                break
            results[stage] = self.run(stage)
            if stage == until:
                break
        return results

    # -- stages --------------------------------------------------------------

    def _stage_features(self, out):
        cfg = self.cfg
        fcfg = FrontendConfig(cfg.frontend.window_ms, cfg.frontend.shift_ms, cfg.frontend.n_mels,
                              cfg.frontend.n_ceps, cfg.frontend.n_fft or None,
                              cfg.frontend.vad_aggressiveness, cfg.frontend.rasta)
        manifests, feats = {}, {}
        for key, name in (("train_manifest", "train.tsv"), ("eval_manifest", "eval.tsv")):
            src = cfg.path(key)
            kept = CorpusManifest()
            for e in CorpusManifest.read(src).resolve(src.parent):
                if e.path.lower().endswith(".wav"):
                    frames = extract_features(read_wav(e.path, e.utterance_id), fcfg).frames
                else:
                    frames = load_features(e.path).frames
                if frames.shape[0] == 0:
                    log.warning("utterance %s has no voiced frames; dropped", e.utterance_id)
                    continue
                feats[e.utterance_id] = frames
                kept.append(e)
            manifests[name] = kept
        _write_feature_set(out, "features", manifests, feats)
        shutil.copyfile(cfg.path("enroll"), out / "enroll.tsv")
        shutil.copyfile(cfg.path("trials"), out / "trials.tsv")

    def _stage_targets(self, out):
        t = self.cfg.targets
        manifest, feats = _read_manifest_features(self.dir("features"), "train.tsv")
        lengths = [len(feats[e.utterance_id]) for e in manifest]
        rows = []
        if t.scheme == "speaker":
            labels, mapping = label_speaker(manifest)
            n_classes = len(mapping)
            for u, e in enumerate(manifest):
                rows.append(np.column_stack([np.full(lengths[u], u), np.arange(lengths[u]),
                                             np.full(lengths[u], labels[e.utterance_id])]))
            (out / "speakers.tsv").write_text(
                "".join(f"{spk}\t{i}\n" for spk, i in mapping.items()), encoding="utf-8")
        elif t.scheme == "utcl":
            n_classes = t.c
            for u, T in enumerate(lengths):
                lab = label_utcl(T, t.c)
                if lab is not None:
                    rows.append(np.column_stack([np.full(T, u), np.arange(T), lab]))
        elif t.scheme == "stcl":
            n_classes = t.c
            per_utt = [np.column_stack([np.full(T, u), np.arange(T)])
                       for u, T in enumerate(lengths)]
            stream, labels, _ = label_stcl(per_utt, t.c, t.M, self.cfg.seed)
            rows.append(np.column_stack([stream, labels]))
        else:  # apc: targets are the shifted frames themselves
            n_classes = 0
        table = np.concatenate(rows).astype(np.int64) if rows else np.zeros((0, 3), np.int64)
        if t.scheme != "apc" and table.shape[0] == 0:
            raise EmptyInputError("no training frames survived target generation")
        np.save(out / "targets.npy", table)
        (out / "targets.txt").write_text(f"scheme = {t.scheme}\nn_classes = {n_classes}\n",
                                         encoding="utf-8")

    def _stage_train_dnn(self, out):
        cfg = self.cfg
        if cfg.bottleneck.features == "raw":
            _skip(out, "bottleneck.features = raw; no network")
            return
        manifest, feats = _read_manifest_features(self.dir("features"), "train.tsv")
        utts = [feats[e.utterance_id] for e in manifest]
        meta = dict(line.split(" = ") for line in
                    (self.dir("targets") / "targets.txt").read_text().splitlines())
        tcfg = TrainConfig(cfg.train.batch_size, cfg.train.learning_rate, cfg.train.epochs,
                           cfg.train.l2_penalty, cfg.seed, cfg.train.optimizer)
        if cfg.targets.scheme == "apc":
            model = build_apc_model(utts[0].shape[1], cfg.network.gru_width,
                                    cfg.network.gru_layers, cfg.network.activation, cfg.seed)
            _, history = train_apc(model, utts, tcfg, cfg.targets.t_n)
        else:
            lo = cfg.loss
            head = LossHead.create(lo.kind, int(meta["n_classes"]), lo.embed_dim, seed=cfg.seed,
                                   lam=lo.lam, gamma=lo.gamma, s=lo.s, m=lo.m, tau=lo.tau,
                                   margin=lo.margin, center_alpha=lo.center_alpha)
            pool = FramePool.from_utterances(utts, cfg.targets.context)
            model = build_dense_model(cfg.targets.context * utts[0].shape[1],
                                      [cfg.network.width] * cfg.network.hidden_layers,
                                      cfg.network.activation, head, cfg.seed,
                                      cfg.targets.scheme, cfg.targets.context)
            table = np.load(self.dir("targets") / "targets.npy")
            rows = pool.offsets[table[:, 0]] + table[:, 1]
            _, history = train_dense(model, pool, rows, table[:, 2], tcfg)
        save_model(out / "model.bnm", model)
        _write_history(out / "history.tsv", history.epoch_loss, "epoch\tloss")

    def _stage_extract_bn(self, out):
        cfg = self.cfg
        src = self.dir("features")
        train, train_feats = _read_manifest_features(src, "train.tsv")
        ev, ev_feats = _read_manifest_features(src, "eval.tsv")
        feats = {**train_feats, **ev_feats}
        if cfg.bottleneck.features == "raw":
            _write_feature_set(out, "bn", {"train.tsv": train, "eval.tsv": ev}, feats)
        else:
            model = load_model(self.dir("train-dnn") / "model.bnm")
            layers = cfg.bottleneck.layer_list
            if max(layers) > model.hidden_layers:
                raise ConfigError(f"network has {model.hidden_layers} tappable layers")

            def taps(x):
                if model.is_recurrent:
                    return tap_layers(model.net, layers, x)
                return tap_layers(model.net, layers, splice_context(x, model.context))

            raw_bn = {u: taps(x) for u, x in feats.items()}
            pca = pca_fit(_pool(train, raw_bn), cfg.bottleneck.pca_dim)
            save_pca(out / "pca.bnp", pca)
            projected = {u: pca_project(pca, x) for u, x in raw_bn.items()}
            _write_feature_set(out, "bn", {"train.tsv": train, "eval.tsv": ev}, projected)
        shutil.copyfile(src / "enroll.tsv", out / "enroll.tsv")
        shutil.copyfile(src / "trials.tsv", out / "trials.tsv")

    def _stage_train_ubm(self, out):
        b = self.cfg.backend
        train, feats = _read_manifest_features(self.dir("extract-bn"), "train.tsv")
        history = []
        ubm = ubm_train_em(_pool(train, feats), b.ubm_components, b.ubm_iters, self.cfg.seed,
                           b.ubm_subsample, history=history)
        save_gmm(out / "ubm.bng", ubm)
        _write_history(out / "history.tsv", history, "iteration\tloglik")

    def _train_stats(self):
        train, feats = _read_manifest_features(self.dir("extract-bn"), "train.tsv")
        ubm = load_gmm(self.dir("train-ubm") / "ubm.bng")
        return train, ubm, [bw_stats(ubm, feats[e.utterance_id]) for e in train]

    def _stage_train_tv(self, out):
        b = self.cfg.backend
        if b.kind != "ivector-plda":
            _skip(out, f"backend {b.kind} has no total-variability model")
            return
        _, ubm, stats = self._train_stats()
        history = []
        tv = train_tmatrix(stats, ubm, b.ivector_dim, b.tv_iters, self.cfg.seed, history=history)
        save_tv(out / "tv.bnt", tv)
        _write_history(out / "history.tsv", history, "iteration\tobjective")

    def _stage_train_plda(self, out):
        b = self.cfg.backend
        if b.kind != "ivector-plda":
            _skip(out, f"backend {b.kind} has no PLDA model")
            return
        train, _, stats = self._train_stats()
        tv = load_tv(self.dir("train-tv") / "tv.bnt")
        w = extract_ivector(tv, stats)
        center = w.mean(axis=0)
        x = w - center
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        # a class is one speaker saying one pass-phrase
        labels = [f"{e.speaker_id}\t{e.phrase_id}" for e in train]
        history = []
        plda = plda_train(x, labels, b.plda_iters, history=history, center=center)
        save_plda(out / "plda.bnpl", plda)
        _write_history(out / "history.tsv", history, "iteration\tloglik")

    def _stage_enroll(self, out):
        b = self.cfg.backend
        src = self.dir("extract-bn")
        _, feats = _read_manifest_features(src, "eval.tsv")
        enroll = read_enroll(src / "enroll.tsv")
        missing = sorted({u for uids in enroll.values() for u in uids} - set(feats))
        if missing:
            raise DependencyError(f"enrollment utterances without features: {missing[:5]}")
        write_enroll(out / "enroll.tsv", enroll)
        if b.kind == "gmm-ubm":
            ubm = load_gmm(self.dir("train-ubm") / "ubm.bng")
            (out / "models").mkdir()
            for eid, uids in enroll.items():
                X = np.vstack([feats[u] for u in uids])
                model = map_adapt(ubm, X, b.relevance, b.map_iters, b.map_posteriors)
                save_gmm(out / "models" / f"{eid}.bng", model)
        else:
            ubm = load_gmm(self.dir("train-ubm") / "ubm.bng")
            tv = load_tv(self.dir("train-tv") / "tv.bnt")
            plda = load_plda(self.dir("train-plda") / "plda.bnpl")
            cache = tv.precompute()
            vectors = [enroll_speaker(plda.preprocess(
                extract_ivector(tv, [bw_stats(ubm, feats[u]) for u in uids], cache)))
                for uids in enroll.values()]
            np.save(out / "ivectors.npy", np.array(vectors))

    def _stage_score(self, out):
        b = self.cfg.backend
        src = self.dir("extract-bn")
        _, feats = _read_manifest_features(src, "eval.tsv")
        trials = read_trials(src / "trials.tsv")
        enroll_ids = list(read_enroll(self.dir("enroll") / "enroll.tsv"))
        unknown = sorted({t.enroll_id for t in trials} - set(enroll_ids))
        if unknown:
            raise DependencyError(f"trials reference unenrolled ids: {unknown[:5]}")
        missing = sorted({t.test_id for t in trials} - set(feats))
        if missing:
            raise DependencyError(f"trials reference test utterances without features: {missing[:5]}")
        ubm = load_gmm(self.dir("train-ubm") / "ubm.bng")
        scores = {}
        if b.kind == "gmm-ubm":
            models = {eid: load_gmm(self.dir("enroll") / "models" / f"{eid}.bng")
                      for eid in enroll_ids}
            ubm_ll = {u: ubm.frame_loglik(feats[u]) for u in sorted({t.test_id for t in trials})}
            for t in trials:
                llr = models[t.enroll_id].frame_loglik(feats[t.test_id]) - ubm_ll[t.test_id]
                scores[t.key] = float(np.mean(llr))
        else:
            tv = load_tv(self.dir("train-tv") / "tv.bnt")
            plda = load_plda(self.dir("train-plda") / "plda.bnpl")
            vectors = dict(zip(enroll_ids, np.load(self.dir("enroll") / "ivectors.npy")))
            cache = tv.precompute()
            tests = sorted({t.test_id for t in trials})
            test_vec = dict(zip(tests, plda.preprocess(
                extract_ivector(tv, [bw_stats(ubm, feats[u]) for u in tests], cache))))
            scorer = PldaScorer(plda)
            for t in trials:
                scores[t.key] = float(scorer.score(vectors[t.enroll_id], test_vec[t.test_id]))
        write_scores(out / "scores.tsv", scores)

    def _evaluate(self, scores, out):
        e = self.cfg.eval
        trials = attach_scores(read_trials(self.dir("extract-bn") / "trials.tsv"), scores)
        report = evaluate_trials(trials, e.c_miss, e.c_fa, e.p_target)
        (out / "report.txt").write_text(report.to_text(self.cfg.experiment.name),
                                                  encoding="utf-8")
        genuine = [t.score for t in trials if t.label == "genuine"]
        for kind in ("target_wrong", "imposter_correct", "imposter_wrong"):
            impostor = [t.score for t in trials if t.label == kind]
            if impostor:
                det_export(genuine, impostor).write(out / f"det_{kind}.tsv")
        return report

    def _stage_evaluate(self, out):
        self.report = self._evaluate(read_scores(self.dir("score") / "scores.tsv"), out)

    def _stage_fuse(self, out):
        systems = self.cfg.fuse.system_list
        if not systems:
            raise ConfigError("no score files listed in [fuse] systems")
        paths = self._fusion_inputs()
        fused = fuse_scores([read_scores(p) for p in paths], self.cfg.fuse.weight_list)
        write_scores(out / "scores.tsv", fused)
        self.report = self._evaluate(fused, out)

