from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml.mathgrammar import (IDENTIFIER, NUMBER, OPERATOR, Accent, Array, Atom, BigOperator, Fenced,
                                 Fraction, Radical, Row, Script, Space, TextInMath, classify_atom,
                                 iter_expr, parse_math)
from texhtml.tokenizer import Lexer

from mathfuzz import random_tokens


def parse(tex: str, display: bool = False):
    expr, diags = parse_math(list(Lexer(tex)._tokens), display)
    return expr, [d.code for d in diags]


def ok(tex: str, display: bool = False):
    expr, codes = parse(tex, display)
    assert codes == [], codes
    return expr


def test_atom_classes():
    assert ok("x") == Atom("x", IDENTIFIER)
    assert ok("42") == Atom("42", NUMBER)
    assert ok("+") == Atom("+", OPERATOR)


def test_decimal_number_is_one_atom():
    assert ok("3.14") == Atom("3.14", NUMBER)


def test_greek_letter():
    assert ok(r"\alpha") == Atom("α", IDENTIFIER)


def test_row_of_atoms():
    e = ok("a+b")
    assert isinstance(e, Row) and len(e.children) == 3


def test_subscript_and_superscript():
    e = ok("a_i^j")
    assert e == Script(Atom("a", IDENTIFIER), Atom("i", IDENTIFIER), Atom("j", IDENTIFIER))


def test_double_superscript_is_an_error():
    assert "double-superscript" in parse("x^1^2")[1]


def test_fraction_and_binomial():
    assert isinstance(ok(r"\frac{a}{b}"), Fraction)
    e = ok(r"\binom{n}{k}")
    assert isinstance(e, Fenced) and isinstance(e.body.children[0], Fraction)
    assert e.body.children[0].line is False


def test_radicals():
    assert ok(r"\sqrt{x}") == Radical(Atom("x", IDENTIFIER))
    assert ok(r"\sqrt[3]{x}").index == Atom("3", NUMBER)


def test_fences_are_stretchy():
    e = ok(r"\left( x \right)")
    assert isinstance(e, Fenced) and e.open.stretchy and e.close.stretchy


def test_invisible_fence():
    e = ok(r"\left. x \right|")
    assert isinstance(e, Fenced) and e.open.text == ""


def test_unmatched_fence_is_diagnosed():
    assert "unmatched-fence" in parse(r"\left( x")[1]


def test_big_operator_limits_depend_on_display():
    inline = ok(r"\sum_{i=1}^n i").children[0]
    display = ok(r"\sum_{i=1}^n i", display=True).children[0]
    assert isinstance(inline, BigOperator) and not inline.limits
    assert display.limits


def test_integral_never_takes_limits():
    assert not ok(r"\int_0^1 f", display=True).children[0].limits


def test_accents():
    e = ok(r"\hat{x}")
    assert isinstance(e, Accent) and e.accent
    assert ok(r"\underbrace{x}").under


def test_matrix_shape():
    e = ok(r"\begin{pmatrix} a & b \\ c & d \end{pmatrix}")
    arrays = [n for n in iter_expr(e) if isinstance(n, Array)]
    assert arrays[0].shape == (2, 2)


def test_text_in_math_keeps_spaces():
    e = ok(r"x \text{ if } y")
    assert TextInMath(" if ") in e.children


def test_spacing_commands():
    assert ok(r"\quad") == Space("1em")
    assert ok(r"\hspace{2em}") == Space("2em")


def test_escaped_characters():
    assert ok(r"\&") == Atom("&", OPERATOR)


def test_unknown_command_is_diagnosed():
    assert "unknown-math-command" in parse(r"\notacommand")[1]


def test_classify_unknown_without_diagnostics_list():
    tok = Lexer(r"\zzz")._tokens[0]
    assert classify_atom(tok).text == r"\zzz"


SCRIPTABLE = st.sampled_from(["a", "x", "1", r"\alpha", "{ab}", "{x+1}", r"\frac{1}{2}"])


@given(SCRIPTABLE, SCRIPTABLE, SCRIPTABLE)
def test_script_order_does_not_matter(base, sub, sup):
    assert ok(f"{base}_{sub}^{sup}") == ok(f"{base}^{sup}_{sub}")


@settings(max_examples=500, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_totality(seed):
    rng = random.Random(seed)
    tokens = random_tokens(rng)
    expr, diags = parse_math(tokens, rng.random() < 0.5)
    assert expr is not None
    assert "math-parse-failure" not in [d.code for d in diags]
    list(iter_expr(expr))


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_determinism(seed):
    tokens = random_tokens(random.Random(seed))
    assert parse_math(tokens)[0] == parse_math(tokens)[0]


@pytest.mark.parametrize("tex", ["a+b", r"\frac{x}{y}", r"\sqrt{a_1}", r"\left( a \right)", "x^2_3",
                                 r"\sum_{i=1}^{n} i", r"\hat{x} + \mathrm{d}t", "12.5x"])
def test_leaves_are_conserved(tex):
    """Every letter and digit token lies inside the span of some atom."""
    tokens = Lexer(tex)._tokens
    expr, _ = parse_math(tokens)
    spans = [n.span for n in iter_expr(expr) if isinstance(n, Atom) and n.span is not None]
    for t in tokens:
        if t.kind == "char" and t.text.isalnum():
            assert any(a <= t.start and t.end <= b for a, b in spans), t
