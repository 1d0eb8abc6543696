from __future__ import annotations

import shutil

import pytest

from texhtml import fixtures
from texhtml.fixtures import CATEGORIES, GOLDENS, discover_fixtures, render

from conftest import FIXTURES

ALL_FIXTURES = discover_fixtures(FIXTURES)


def test_every_category_has_at_least_ten_fixtures():
    for cat in CATEGORIES:
        assert len(discover_fixtures(FIXTURES, cat)) >= 10, cat


def test_every_fixture_has_all_goldens():
    for f in ALL_FIXTURES:
        for name in GOLDENS:
            assert (f.path / name).is_file(), f"{f.category}/{f.id}/{name}"


@pytest.mark.parametrize("fixture", ALL_FIXTURES, ids=lambda f: f"{f.category}/{f.id}")
def test_golden(fixture):
    result = fixtures.check(fixture)
    assert result.passed, "\n".join(result.diffs.values())


def test_render_is_deterministic():
    for f in ALL_FIXTURES[::7]:
        assert render(f.source) == render(f.source)


def test_check_reports_missing_and_stale_goldens(tmp_path):
    src = ALL_FIXTURES[0]
    dest = tmp_path / src.category / src.id
    shutil.copytree(src.path, dest)
    (dest / "tree.txt").unlink()
    (dest / "output.html").write_text("old\n", encoding="utf-8")
    (res,) = fixtures.run_suite(tmp_path)
    assert set(res.diffs) == {"tree.txt", "output.html"}
    assert res.diffs["tree.txt"].startswith("missing golden")
    assert fixtures.regenerate(tmp_path) == 1
    assert fixtures.run_suite(tmp_path)[0].passed
    assert "1/1 fixtures passed" in fixtures.format_table(fixtures.run_suite(tmp_path))
