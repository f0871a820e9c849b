"""Command-line entry point: ``bnsv <subcommand> [options]``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 missing
dependency, 4 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import BnsvError, NumericalError
from .losses import LOSS_KINDS
from .pipeline import STAGES, Pipeline, StageLock
from .synth import DEFAULT_NOISE, SyntheticCorpusSpec, synth_corpus
from .trainer import network_grad_check

GRAD_CHECK_ACTIVATIONS = ("sigmoid", "relu", "gelu", "tanh")


def _add_stage_flags(p):
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--stage-dir", help="artifact directory (default: <config dir>/stages)")
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--force", action="store_true",
                   help="rebuild even if the stage was built with a different config")


def build_parser():
    parser = argparse.ArgumentParser(prog="bnsv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus plus a default experiment.ini")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE, help="session noise scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--phrases", type=int, default=5)
    p.add_argument("--sessions", type=int, default=3)
    p.add_argument("--frames", type=int, default=100)

    for stage in STAGES:
        _add_stage_flags(sub.add_parser(stage, help=f"run the {stage} stage"))
    p = sub.add_parser("run", help="run every stage in order")
    _add_stage_flags(p)
    p.add_argument("--until", choices=STAGES, help="stop after this stage")

    p = sub.add_parser("grad-check", help="finite-difference check of network + loss gradients")
    p.add_argument("--loss", default="all", choices=("all",) + LOSS_KINDS)
    p.add_argument("--activation", default="all", choices=("all",) + GRAD_CHECK_ACTIVATIONS)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth(args):
    spec = SyntheticCorpusSpec(n_speakers=args.speakers, n_phrases=args.phrases,
                               sessions=args.sessions, frames=args.frames,
                               noise_scale=args.noise, seed=args.seed)
    out = Path(args.out)
    corpus = synth_corpus(spec, out)
    cfg = ExperimentConfig()
    cfg.experiment.name = out.resolve().name
    cfg.experiment.seed = args.seed
    (out / "experiment.ini").write_text(cfg.to_ini(), encoding="utf-8")
    print(f"wrote {len(corpus.features)} utterances, {len(corpus.trials)} trials "
          f"and experiment.ini to {out}")


def _pipeline(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    stage_dir = Path(args.stage_dir) if args.stage_dir else Path(args.config).parent / "stages"
    return Pipeline(cfg, stage_dir, force=args.force)


def _print_report(pipe, stage):
    path = pipe.dir(stage) / "report.txt"
    if path.exists():
        print(path.read_text(encoding="utf-8"), end="")


def _cmd_stage(args):
    pipe = _pipeline(args)
    with StageLock(pipe.root):
        if args.command == "run":
            results = pipe.run_all(args.until)
        else:
            results = {args.command: pipe.run(args.command)}
    for stage, status in results.items():
        print(f"{stage}: {status}")
    last = list(results)[-1] if results else None
    if last in ("evaluate", "fuse"):
        _print_report(pipe, last)


def _cmd_grad_check(args):
    kinds = LOSS_KINDS if args.loss == "all" else (args.loss,)
    acts = GRAD_CHECK_ACTIVATIONS if args.activation == "all" else (args.activation,)
    failed = []
    for kind in kinds:
        for act in acts:
            report = network_grad_check(kind, act, seed=args.seed)
            status = "ok" if report.passed else "FAIL"
            print(f"{kind:<13} {act:<8} max rel error {report.max_rel_error:.3e} "
                  f"({report.n_checked} params, {report.n_null} below resolution) {status}")
            if not report.passed:
                failed.append(f"{kind}/{act}")
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            _cmd_synth(args)
        elif args.command == "grad-check":
            _cmd_grad_check(args)
        else:
            _cmd_stage(args)
    except BnsvError as exc:
        print(f"bnsv: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
