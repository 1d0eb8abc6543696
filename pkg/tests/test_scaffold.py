from __future__ import annotations

import re
from html.parser import HTMLParser

import pytest

from texhtml.fixtures import discover_fixtures
from texhtml.harness import convert_source
from texhtml.scaffold import PageConfig, assemble_page, page_text, tree_text

from conftest import FIXTURES

ALL_FIXTURES = discover_fixtures(FIXTURES)


class _Tags(HTMLParser):
    def __init__(self):
        super().__init__()
        self.tags = []

    def handle_starttag(self, tag, attrs):
        self.tags.append((tag, dict(attrs)))


def tags(html):
    p = _Tags()
    p.feed(html)
    return p.tags


def test_head_metadata(convert):
    res = convert(r"\maketitle x", preamble="\\title{On $x$}\n\\author{Ann \\and Bo}\n\\keywords{a, b}\n")
    html = res.html
    assert "<title>On x</title>" in html
    assert '<meta name="author" content="Ann">' in html and '<meta name="author" content="Bo">' in html
    assert '<meta charset="utf-8">' in html


def test_theme_is_linked_not_inlined(convert):
    html = convert("x").html
    assert '<link rel="stylesheet" href="texhtml.css">' in html
    assert "<style" not in html


def test_services_script_is_external_and_deferred(convert):
    html = convert("x", theme_ref="t.css", services_ref="svc.js").html
    scripts = [a for t, a in tags(html) if t == "script"]
    assert scripts == [{"src": "svc.js", "defer": None}]
    assert '<link rel="stylesheet" href="t.css">' in html


def test_generated_text_is_marked(convert):
    html = convert(r"\section{Intro} See \ref{s}.\label{s}").html
    assert '<span class="gen secnum">1 </span>' in html


def test_fallback_markup(convert):
    html = convert("A \\weird{x} b.\n\n\\begin{odd}\nz\n\\end{odd}").html
    assert '<code class="fallback" data-construct="weird">\\weird</code>' in html
    assert '<pre class="fallback" data-construct="odd">' in html


def test_untitled_document_gets_placeholder(convert):
    assert "<title>Untitled document</title>" in convert("x").html


def test_assemble_page_without_math_uses_fallback():
    res = convert_source("\\documentclass{article}\\begin{document}$x$\\end{document}")
    page = assemble_page(res.tree, res.frontmatter, PageConfig())
    assert '<code class="fallback" data-construct="math">x</code>' in page.markup


def _headings_follow_nesting(html):
    levels = [int(t[1]) for t, _ in tags(html) if re.fullmatch(r"h[1-6]", t)]
    for prev, cur in zip(levels, levels[1:]):
        assert cur <= prev + 1, levels


@pytest.mark.parametrize("fixture", ALL_FIXTURES, ids=lambda f: f"{f.category}/{f.id}")
def test_fixture_page_contract(fixture):
    res = convert_source(fixture.source, fixture.id)
    if res.html is None:
        return
    html = res.html
    assert not re.search(r"\sstyle\s*=", html)
    assert all(t != "style" for t, _ in tags(html))
    assert all(t != "script" or "src" in a for t, a in tags(html))
    assert page_text(html) == tree_text(res.tree)
    _headings_follow_nesting(html)
