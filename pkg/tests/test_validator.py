from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml.mathgrammar import parse_math
from texhtml.mathml import MathMLNode, emit_math, parse_mathml
from texhtml.validator import resolve, validate_core, validate_intent

from mathfuzz import random_tokens
from mutations import MUTATIONS, mutate


def rules(markup: str):
    return [v.rule for v in validate_core(parse_mathml(markup))]


def wrap(body: str) -> str:
    return (f'<math display="inline" intent=":literal"><semantics>{body}'
            '<annotation encoding="application/x-tex">x</annotation></semantics></math>')


def test_clean_tree_has_no_violations():
    assert rules(wrap("<mrow><mi>x</mi><mo>+</mo><mn>1</mn></mrow>")) == []


def test_unknown_element():
    assert rules(wrap("<mfenced><mi>x</mi></mfenced>")) == ["element-whitelist"]


def test_unknown_attribute():
    assert rules(wrap('<mi style="color:red">x</mi>')) == ["attribute-whitelist"]


def test_attribute_value():
    assert rules(wrap('<mi mathvariant="bold">x</mi>')) == ["attribute-value"]


def test_arity():
    assert rules(wrap("<mfrac><mi>x</mi></mfrac>")) == ["arity"]


def test_token_element_children():
    assert rules(wrap("<mi><mi>x</mi></mi>")) == ["text-content"]


def test_bare_text_in_layout():
    assert rules(wrap("<mrow>x</mrow>")) == ["text-content"]


def test_table_nesting():
    assert "child-element" in rules(wrap("<mtable><mtd><mi>x</mi></mtd></mtable>"))
    assert "child-element" in rules(wrap("<mrow><mtr/></mrow>"))


def test_semantics_order():
    bad = ('<math><semantics><annotation encoding="application/x-tex">x</annotation>'
           '<mi>x</mi></semantics></math>')
    assert "child-element" in rules(bad)


def test_data_attributes_are_ignored():
    assert rules(wrap('<mi data-origin="1">x</mi>')) == []


def test_violation_paths_point_at_the_node():
    tree = parse_mathml(wrap("<mrow><mi>x</mi><mblah/></mrow>"))
    (v,) = validate_core(tree)
    assert resolve(tree, v.path).name == "mblah"
    assert v.path == (0, 0, 1)


@pytest.mark.parametrize("value", [":literal", "plus", "_x", "plus:prefix", "power:infix:literal", "a.b-c_d"])
def test_valid_intents(value):
    assert validate_intent(value)


@pytest.mark.parametrize("value", ["", ":", "two words", "1abc", "f(x", "a::b", ":literal:", None])
def test_invalid_intents(value):
    assert not validate_intent(value)


def _emitted(seed: int) -> MathMLNode:
    rng = random.Random(seed)
    expr, _ = parse_math(random_tokens(rng), rng.random() < 0.5)
    return emit_math(expr, "src", rng.random() < 0.5)


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_emitter_output_always_validates(seed):
    assert validate_core(_emitted(seed)) == []


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=0, max_value=2**32 - 1))
def test_mutations_are_detected_and_paths_resolve(tree_seed, mut_seed):
    tree, desc = mutate(_emitted(tree_seed), random.Random(mut_seed))
    violations = validate_core(tree)
    assert violations, desc
    for v in violations:
        resolve(tree, v.path)


@pytest.mark.parametrize("op", MUTATIONS, ids=lambda f: f.__name__)
def test_each_mutation_operator_is_detected(op):
    tree = _emitted(3)
    op(tree, random.Random(0))
    assert validate_core(tree)
