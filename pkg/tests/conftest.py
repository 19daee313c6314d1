import numpy as np
import pytest
from hypothesis import settings

from hetfx import synth

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_obs():
    """Confounded dataset small enough for per-test pipelines."""
    cfg = synth.DgpConfig(n=1500, n_clusters=60, p_x=3, p=10, s=3, a=(0.6, -0.5, 0.4), seed=99)
    return synth.generate(cfg)


@pytest.fixture(scope="session")
def rct_linear():
    return synth.generate(synth.default_configs()["rct-linear"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" ({detail})"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
