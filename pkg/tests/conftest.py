import configparser

import pytest

from bnsv.synth import SyntheticCorpusSpec, synth_corpus

SMALL_SPEC = dict(n_speakers=4, n_phrases=2, sessions=3, frames=40, n_background=4, dim=12,
                  n_units=8, units_per_phrase=4, speaker_rank=4, nuisance_rank=3, seed=3)

SMALL_INI = """\
[experiment]
name = small
seed = 1
[network]
hidden_layers = 2
width = 16
gru_layers = 2
gru_width = 8
[loss]
embed_dim = 8
[train]
batch_size = 64
epochs = 2
[bottleneck]
pca_dim = 6
[backend]
ubm_components = 4
ubm_iters = 3
ivector_dim = 3
tv_iters = 2
plda_iters = 2
"""


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    synth_corpus(SyntheticCorpusSpec(**SMALL_SPEC), out)
    return out


@pytest.fixture
def small_config(small_corpus, tmp_path):
    """Config file next to a private stage dir; corpus paths are absolute."""
    corpus = "".join(f"{k} = {small_corpus / v}\n" for k, v in (
        ("train_manifest", "train.tsv"), ("eval_manifest", "eval.tsv"),
        ("enroll", "enroll.tsv"), ("trials", "trials.tsv")))

    def write(extra="", name="exp.ini"):
        # later sections override earlier keys
        parser = configparser.ConfigParser(interpolation=None, strict=False)
        parser.optionxform = str
        parser.read_string(SMALL_INI + "[corpus]\n" + corpus + extra)
        path = tmp_path / name
        path.write_text("".join(f"[{n}]\n" + "".join(f"{k} = {v}\n" for k, v in parser.items(n))
                                for n in parser.sections()), encoding="utf-8")
        return path
    return write


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE_LINES = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for an acceptance criterion.

    The test sets ``record.number``, ``record.title`` and, optionally,
    ``record.detail``; the verdict comes from the test outcome.
    """
    class Record:
        number, title, detail = 0, "", ""

    record = Record()
    yield record
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    line = f"criterion {record.number:>2} {verdict}: {record.title}"
    if record.detail:
        line += f" [{record.detail}]"
    _ACCEPTANCE_LINES.append((record.number, line))
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
