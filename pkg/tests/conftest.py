from __future__ import annotations

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
SAMPLES = ROOT / "samples"

sys.path.insert(0, str(ROOT / "scripts"))


def wrap(body: str, preamble: str = "") -> str:
    """A minimal article around ``body``."""
    return f"\\documentclass{{article}}\n{preamble}\\begin{{document}}\n{body}\n\\end{{document}}\n"


@pytest.fixture
def convert():
    from texhtml.harness import HarnessConfig, convert_source

    def run(body: str, preamble: str = "", **config):
        return convert_source(wrap(body, preamble), "doc", HarnessConfig(**config))

    return run


@pytest.fixture(scope="session")
def sample_corpus(tmp_path_factory):
    """A freshly generated copy of the sample corpus."""
    import make_sample_corpus

    out = tmp_path_factory.mktemp("samples") / "corpus"
    make_sample_corpus.build(out)
    return out


# One summary line per acceptance criterion, whatever the verbosity.
_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "ran": False})
    if call.when == "call":
        entry["ran"] = True
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {entry['title']}")
