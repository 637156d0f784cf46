import pytest

from attnscene.data import load_split
from attnscene.synth import SynthConfig, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Nine classes, two-second mono clips: fast enough for end-to-end tests."""
    cfg = SynthConfig(n_train=18, n_dev=9, n_eval=9, clip_seconds=2.0, events_per_clip=(2, 2),
                      event_seconds=(0.2, 0.4), seed=7)
    return synth_corpus(cfg, tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def tiny_splits(tiny_corpus):
    return {s: load_split(tiny_corpus, s) for s in ("train", "dev", "eval")}


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
