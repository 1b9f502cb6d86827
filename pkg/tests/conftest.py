import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowcap.analyzer import run_oa  # noqa: E402
from flowcap.pipeline import CorpusSpec, generate_corpus  # noqa: E402

SMALL = CorpusSpec(users=40, friends_per_user=10, docs=600, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL)


@pytest.fixture(scope="session")
def small_oa(small_corpus):
    return run_oa(small_corpus.manifest, small_corpus.policies, small_corpus.view())


@pytest.fixture(scope="session")
def full_corpus():
    return generate_corpus(CorpusSpec())


@pytest.fixture(scope="session")
def full_oa(full_corpus):
    return run_oa(full_corpus.manifest, full_corpus.policies, full_corpus.view())


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collects one verdict line per acceptance criterion for the run summary."""
    lines = []
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
