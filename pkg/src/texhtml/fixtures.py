"""Golden-file fixture suite.

Each fixture lives in ``<root>/<category>/<id>/`` with ``source.tex`` and
three goldens: ``tree.txt`` (document tree dump), ``output.html`` and
``summary.json`` (the conversion report without timings).
"""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .docmodel import dump
from .harness import HarnessConfig, convert_source, read_source

CATEGORIES = ("tokenizer", "macro", "model", "math", "emit", "fallback", "frontmatter", "corpus")
GOLDENS = ("tree.txt", "output.html", "summary.json")


@dataclass
class Fixture:
    id: str
    category: str
    path: Path

    @property
    def source(self) -> str:
        return read_source(self.path / "source.tex")


@dataclass
class FixtureResult:
    fixture: Fixture
    diffs: Dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.diffs


def discover_fixtures(root, category: Optional[str] = None) -> List[Fixture]:
    root = Path(root)
    out = []
    for cat in CATEGORIES:
        if category is not None and cat != category:
            continue
        base = root / cat
        if not base.is_dir():
            continue
        for d in sorted(base.iterdir()):
            if (d / "source.tex").is_file():
                out.append(Fixture(d.name, cat, d))
    return out


def render(source: str, doc_id: str = "source") -> Dict[str, str]:
    """The golden texts for one source."""
    result = convert_source(source, doc_id, HarnessConfig())
    tree = dump(result.tree) + "\n" if result.tree is not None else "(no tree)\n"
    summary = json.dumps(result.report.to_json(timings=False), indent=2, sort_keys=True,
                         ensure_ascii=False) + "\n"
    return {"tree.txt": tree, "output.html": result.html or "", "summary.json": summary}


def check(fixture: Fixture) -> FixtureResult:
    actual = render(fixture.source)
    res = FixtureResult(fixture)
    for name in GOLDENS:
        path = fixture.path / name
        expected = path.read_text(encoding="utf-8") if path.is_file() else None
        if expected == actual[name]:
            continue
        res.diffs[name] = "".join(difflib.unified_diff(
            (expected or "").splitlines(keepends=True), actual[name].splitlines(keepends=True),
            f"{fixture.category}/{fixture.id}/{name} (golden)", f"{fixture.category}/{fixture.id}/{name} (actual)"))
        if expected is None:
            res.diffs[name] = f"missing golden {name}\n" + res.diffs[name]
    return res


def run_suite(root, category: Optional[str] = None) -> List[FixtureResult]:
    """Convert every fixture (optionally one category) and diff against its goldens."""
    return [check(f) for f in discover_fixtures(root, category)]


def regenerate(root, category: Optional[str] = None) -> int:
    """Rewrite the goldens from the current pipeline; returns the number of fixtures."""
    fixtures = discover_fixtures(root, category)
    for f in fixtures:
        for name, text in render(f.source).items():
            (f.path / name).write_text(text, encoding="utf-8")
    return len(fixtures)


def format_table(results: List[FixtureResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.fixture.category}/{r.fixture.id}" for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} fixtures passed")
    return "\n".join(lines) + "\n"
