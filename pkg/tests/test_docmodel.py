from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml.docmodel import iter_nodes, math_leaves
from texhtml.fixtures import discover_fixtures
from texhtml.harness import convert_source

from conftest import FIXTURES, wrap

ALL_FIXTURES = discover_fixtures(FIXTURES)


def kinds(node):
    return [c.kind for c in node.children]


def body(tree):
    return [c for c in tree.children if c.kind != "frontmatter"]


def test_paragraphs_split_on_blank_lines(convert):
    tree = convert("One.\n\nTwo.").tree
    assert [c.kind for c in body(tree)] == ["paragraph", "paragraph"]


def test_sections_nest_by_depth(convert):
    tree = convert(r"\section{A} x \subsection{B} y \section{C} z").tree
    a, c = body(tree)
    assert a.attrs["number"] == "1" and c.attrs["number"] == "2"
    sub = [n for n in a.children if n.kind == "section"]
    assert sub[0].attrs["depth"] == 2 and sub[0].attrs["number"] == "1.1"


def test_starred_section_is_unnumbered(convert):
    (sec,) = body(convert(r"\section*{Intro} x").tree)
    assert "number" not in sec.attrs


def test_lists_hold_items(convert):
    (lst,) = body(convert(r"\begin{itemize}\item a \item b\end{itemize}").tree)
    assert lst.kind == "list" and kinds(lst) == ["list-item", "list-item"]


def test_label_ref_resolves_to_number(convert):
    res = convert(r"\section{A}\label{s:a} See \ref{s:a}.")
    refs = [n for n in iter_nodes(res.tree) if n.kind == "ref"]
    assert refs[0].attrs["number"] == "1"
    assert not [d for d in res.report.diagnostics if d.code == "undefined-reference"]


def test_undefined_reference_warns(convert):
    res = convert(r"See \ref{nowhere}.")
    assert "undefined-reference" in [d.code for d in res.report.diagnostics]


def test_theorem_numbering(convert):
    res = convert(r"\begin{theorem}A.\end{theorem}\begin{theorem}B.\end{theorem}",
                  preamble="\\newtheorem{theorem}{Theorem}\n")
    blocks = [n for n in iter_nodes(res.tree) if n.kind == "block"]
    assert [b.attrs.get("number") for b in blocks] == ["1", "2"]


def test_math_leaf_records_source_slice(convert):
    src = wrap(r"Let $x \in A$ and \[ y^2 \].")
    res = convert_source(src)
    leaves = math_leaves(res.tree)
    assert [leaf.verbatim for leaf in leaves] == [r"x \in A", "y^2"]
    assert [leaf.attrs["display"] for leaf in leaves] == ["inline", "block"]


def test_unknown_environment_becomes_fallback_blob(convert):
    res = convert("\\begin{mystery}\nkeep $this$\n\\end{mystery}")
    (blob,) = [n for n in iter_nodes(res.tree) if n.kind == "fallback-blob"]
    assert blob.attrs["construct"] == "mystery"
    assert blob.verbatim.strip() == "keep $this$"


def test_frontmatter_extraction(convert):
    res = convert(r"\maketitle x", preamble="\\title{T}\n\\author{A \\and B}\n")
    fm = res.frontmatter
    assert fm.title_text == "T"
    assert [a.name for a in fm.authors] == ["A", "B"]


def test_frontmatter_affiliations(convert):
    pre = "\\title{T}\n\\author{Ann\\inst{1}}\n\\institute{Lab}\n"
    fm = convert(r"\maketitle x", preamble=pre).frontmatter
    assert fm.authors[0].affiliation_refs == ["1"]
    assert fm.affiliations["1"].text_content() == "Lab"


def _check_structure(tree):
    for n in iter_nodes(tree):
        if n.kind == "paragraph":
            assert all(c.kind != "section" for c in iter_nodes(n) if c is not n)
        for c in n.children:
            if c.kind == "list-item":
                assert n.kind == "list", n.kind


@pytest.mark.parametrize("fixture", ALL_FIXTURES, ids=lambda f: f"{f.category}/{f.id}")
def test_fixture_structure_and_verbatim(fixture):
    source = fixture.source
    res = convert_source(source, fixture.id)
    if res.tree is None:
        return
    _check_structure(res.tree)
    for n in iter_nodes(res.tree):
        if n.verbatim_span is not None:
            a, b = n.verbatim_span
            assert n.verbatim == source[a:b] or n.verbatim == source[a:b].strip()


PIECES = st.sampled_from([
    "word ", "\n\n", r"\section{S} ", r"\subsection{T} ", r"\begin{itemize}\item a ", r"\end{itemize}",
    r"\item b ", "$x^2$ ", r"\emph{e} ", "{", "}", r"\[ y \] ", r"\begin{quote}q ", r"\end{quote}",
])


@settings(max_examples=200, deadline=None)
@given(st.lists(PIECES, max_size=20).map("".join))
def test_random_documents_keep_structure(text):
    res = convert_source(wrap(text))
    assert res.tree is not None
    _check_structure(res.tree)
