from __future__ import annotations

import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml.diagnostics import EndOfInput, InvalidCharacter
from texhtml.tokenizer import (CHAR, CS, Catcode, Lexer, canonical, default_catcodes, detokenize,
                               next_expandable, tokenize)

# Characters that exercise every default category code.
TEX_ALPHABET = st.text(alphabet="ab1 \t\n\\{}$&#^_%~@.,xyz^A", max_size=80)
GAP = re.compile(r"(?:[ \t\r\n]|%[^\n]*\n?|\^\^.)*")


def kinds(text):
    return [canonical(t) for t in tokenize(text)]


def test_letters_and_other_characters():
    toks = tokenize("a1")
    assert [(t.kind, t.text, t.cat) for t in toks] == [(CHAR, "a", Catcode.LETTER), (CHAR, "1", Catcode.OTHER)]


def test_control_word_swallows_following_spaces():
    toks = tokenize(r"\foo   bar")
    assert toks[0].is_cs("foo") and toks[0].span == (0, 4)
    assert toks[1].text == "b"


def test_control_symbol_keeps_following_space():
    toks = tokenize(r"\% x")
    assert toks[0].is_cs("%")
    assert toks[1].is_char(Catcode.SPACE)


def test_blank_line_is_par():
    toks = tokenize("a\n\nb")
    assert [t.kind for t in toks] == [CHAR, CHAR, CS, CHAR]
    assert toks[1].is_char(Catcode.SPACE) and toks[2].is_cs("par")


def test_spaces_collapse_to_one():
    toks = tokenize("a   \t b")
    assert [t.text for t in toks] == ["a", " ", "b"]


def test_comment_runs_to_end_of_line():
    assert [t.text for t in tokenize("a% gone\nb")] == ["a", "b"]


def test_leading_spaces_on_a_line_are_skipped():
    assert [t.text for t in tokenize("a\n   b")] == ["a", " ", "b"]


def test_crlf_line_endings():
    def meanings(text):
        return [t.meaning for t in tokenize(text)]

    assert meanings("a\r\n\r\nb") == meanings("a\n\nb")


def test_hat_hat_notation():
    toks = tokenize("^^41")
    assert toks[0].text == "A" and toks[0].span == (0, 4)


def test_invalid_character_raises():
    with pytest.raises(InvalidCharacter):
        tokenize("a\x7fb")


def test_lexer_reports_invalid_character_as_diagnostic():
    lexer = Lexer("a\x7fb")
    assert [d.code for d in lexer.diagnostics] == [InvalidCharacter.code]


def test_catcode_change_rescans_remainder():
    table = default_catcodes().copy()
    table["@"] = Catcode.LETTER
    lexer = Lexer(r"\a@b \c@d")
    first = lexer.next_token()
    assert first.is_cs("a")
    lexer.set_table(table)
    rest = list(lexer)
    assert any(t.is_cs("c@d") for t in rest)


def test_spans_are_code_points():
    toks = tokenize("é\\ü")
    assert toks[0].span == (0, 1)
    assert toks[1].span == (1, 3)


def test_copy_on_write_table():
    base = default_catcodes()
    table = base.copy()
    table["@"] = Catcode.LETTER
    assert base["@"] == Catcode.OTHER and table["@"] == Catcode.LETTER


def test_detokenize_round_trip_simple():
    assert detokenize(tokenize(r"\foo{a b}")) == r"\foo{a b}"


def test_next_expandable_raises_at_end():
    lexer = Lexer("")
    with pytest.raises(EndOfInput):
        next_expandable(lexer)


@given(TEX_ALPHABET)
def test_determinism(text):
    assert kinds(text) == kinds(text)


@given(TEX_ALPHABET)
def test_spans_tile_the_input(text):
    """Token spans never overlap and the gaps hold only consumed material."""
    pos = 0
    for t in Lexer(text)._tokens:
        assert t.start >= pos and t.end > t.start
        assert GAP.fullmatch(text[pos:t.start]), (text, pos, t)
        pos = t.end
    assert pos <= len(text)
    assert GAP.fullmatch(text[pos:])


@settings(max_examples=200)
@given(TEX_ALPHABET)
def test_incremental_matches_batch(text):
    lexer = Lexer(text)
    got = []
    while True:
        try:
            got.append(next_expandable(lexer))
        except EndOfInput:
            break
    assert [canonical(t) for t in got] == [canonical(t) for t in Lexer(text)._tokens]
