from __future__ import annotations

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml.mathgrammar import parse_math
from texhtml.mathml import (LITERAL_INTENT, TEX_ENCODING, MathMLNode, annotation_text, emit_math, escape,
                            math_in_html, parse_mathml, serialize)
from texhtml.tokenizer import Lexer

from mathfuzz import random_tokens


def emit(tex: str, display: bool = False) -> MathMLNode:
    expr, _ = parse_math(list(Lexer(tex)._tokens), display)
    return emit_math(expr, tex, display)


def presentation(tex: str) -> str:
    root = emit(tex)
    return serialize(root.children[0].children[0])


def test_root_shape():
    root = emit("x")
    assert root.name == "math" and root.attrs == {"display": "inline", "intent": LITERAL_INTENT}
    sem = root.children[0]
    assert sem.name == "semantics"
    ann = sem.children[-1]
    assert ann.name == "annotation" and ann.attrs["encoding"] == TEX_ENCODING


def test_display_attribute():
    assert emit("x", display=True).attrs["display"] == "block"


def test_token_elements():
    assert presentation("x") == "<mi>x</mi>"
    assert presentation("7") == "<mn>7</mn>"
    assert presentation("+") == "<mo>+</mo>"


def test_multi_letter_identifier_is_upright():
    assert presentation(r"\sin") == '<mi mathvariant="normal">sin</mi>'


def test_scripts_and_fractions():
    assert presentation("a_i^j") == "<msubsup><mi>a</mi><mi>i</mi><mi>j</mi></msubsup>"
    assert presentation(r"\frac{1}{2}") == "<mfrac><mn>1</mn><mn>2</mn></mfrac>"


def test_stretchy_fences():
    out = presentation(r"\left( x \right)")
    assert out.startswith('<mrow><mo fence="true" stretchy="true">(</mo>')


def test_matrix_becomes_table():
    out = presentation(r"\begin{matrix} a & b \end{matrix}")
    assert "<mtable><mtr><mtd><mi>a</mi></mtd><mtd><mi>b</mi></mtd></mtr></mtable>" in out


def test_escaping():
    assert escape("<&>\"'") == "&lt;&amp;&gt;&quot;&#39;"
    root = emit("a<b")
    assert "<annotation encoding=\"application/x-tex\">a&lt;b</annotation>" in serialize(root)


def test_annotation_text_round_trip():
    tex = r"x < y \& \text{'quoted'}"
    assert annotation_text(parse_mathml(serialize(emit(tex)))) == tex


def test_namespace_only_in_standalone_mode():
    root = emit("x")
    assert "xmlns" not in serialize(root)
    assert serialize(root, xmlns=True).startswith('<math display="inline" intent=":literal" xmlns=')


def test_math_in_html_finds_every_element():
    html = "<p>" + serialize(emit("a")) + " and " + serialize(emit("b^2")) + "</p>"
    found = math_in_html(html)
    assert [annotation_text(m) for m in found] == ["a", "b^2"]


def test_empty_elements_self_close():
    assert presentation(r"\quad") == '<mspace width="1em"/>'


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_serialize_parse_fixpoint(seed):
    tokens = random_tokens(random.Random(seed))
    expr, _ = parse_math(tokens)
    text = serialize(emit_math(expr, "src", False))
    again = serialize(parse_mathml(text))
    assert again == text
    assert serialize(parse_mathml(again)) == again
