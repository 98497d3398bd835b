import re

import numpy as np
import pytest

from svback import synth


@pytest.fixture(scope="session")
def small_corpus():
    spec = synth.CorpusSpec(n_speakers=60, utts_per_speaker=5, dim=6, seed=7)
    return spec, synth.make_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one line per criterion at the end of the run --------

_CRITERIA = {}
_DETAILS = {}
_NAME = re.compile(r"test_criterion_(\d+)")


@pytest.fixture
def record():
    """``record(n, detail)`` attaches a measurement line to criterion ``n``."""
    def _record(n, detail):
        _DETAILS.setdefault(n, []).append(detail)
    return _record


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed or (report.when == "call" and n not in _CRITERIA):
        _CRITERIA[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        detail = "; ".join(_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n}: {_CRITERIA[n]}  {detail}".rstrip())
