"""Syntax-first parsing of math token lists into expression trees.

The parser is total: malformed input degrades into rows of atoms with a
diagnostic, and every input token ends up inside an atom or is consumed as
structure (scripts, braces, alignment marks, known commands).
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from . import assets
from .diagnostics import Diagnostic, Span, error, warning
from .tokenizer import CHAR, CS, MARKER, PARAM, Catcode, Token

IDENTIFIER = "identifier"
NUMBER = "number"
OPERATOR = "operator"


@dataclass(frozen=True)
class Atom:
    text: str
    cls: str
    stretchy: Optional[bool] = None
    size: Optional[str] = None
    variant: Optional[str] = None
    span: Optional[Span] = field(default=None, compare=False)


@dataclass(frozen=True)
class Row:
    children: Tuple["MathExpr", ...] = ()


@dataclass(frozen=True)
class Script:
    base: "MathExpr"
    sub: Optional["MathExpr"] = None
    sup: Optional["MathExpr"] = None

    def __post_init__(self):
        if self.sub is None and self.sup is None:
            raise ValueError("script needs a subscript or a superscript")


@dataclass(frozen=True)
class Fraction:
    num: "MathExpr"
    den: "MathExpr"
    line: bool = True


@dataclass(frozen=True)
class Radical:
    radicand: "MathExpr"
    index: Optional["MathExpr"] = None


@dataclass(frozen=True)
class Fenced:
    open: Atom
    body: Row
    close: Atom


@dataclass(frozen=True)
class BigOperator:
    op: Atom
    under: Optional["MathExpr"] = None
    over: Optional["MathExpr"] = None
    limits: bool = False


@dataclass(frozen=True)
class Accent:
    base: "MathExpr"
    mark: "MathExpr"
    under: bool = False
    accent: bool = True


@dataclass(frozen=True)
class Array:
    rows: Tuple[Tuple["MathExpr", ...], ...]

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.rows), (len(self.rows[0]) if self.rows else 0)


@dataclass(frozen=True)
class TextInMath:
    text: str
    span: Optional[Span] = field(default=None, compare=False)


@dataclass(frozen=True)
class Space:
    width: str
    phantom: Optional["MathExpr"] = None


MathExpr = Union[Atom, Row, Script, Fraction, Radical, Fenced, BigOperator, Accent, Array,
                 TextInMath, Space]


# -- tables -----------------------------------------------------------------

SUM_CLASS = {"sum", "prod", "coprod", "bigcup", "bigcap", "bigoplus", "bigotimes", "bigodot",
             "biguplus", "bigsqcup", "bigvee", "bigwedge"}
LIM_CLASS = {"lim", "liminf", "limsup", "max", "min", "sup", "inf", "det", "gcd", "Pr"}
INT_CLASS = {"int", "iint", "iiint", "oint"}

FRACTIONS = {"frac": True, "dfrac": True, "tfrac": True, "cfrac": True}
BINOMS = {"binom", "dbinom", "tbinom"}
INFIX = {"over": "over", "atop": "atop", "choose": "choose"}

ACCENT_MARKS = {
    "hat": ("^", False), "widehat": ("^", False), "check": ("ˇ", False),
    "tilde": ("~", False), "widetilde": ("~", False), "bar": ("¯", False),
    "overline": ("‾", False), "vec": ("→", False), "dot": ("˙", False),
    "ddot": ("¨", False), "breve": ("˘", False), "acute": ("´", False),
    "grave": ("`", False), "mathring": ("˚", False), "overbrace": ("⏞", False),
    "underbrace": ("⏟", True), "underline": ("_", True),
    "overrightarrow": ("→", False), "overleftarrow": ("←", False),
}

FONT_STYLES = {
    "mathbf": "BOLD", "mathit": "ITALIC", "mathsf": "SANS-SERIF", "mathtt": "MONOSPACE",
    "mathcal": "SCRIPT", "mathscr": "SCRIPT", "mathbb": "DOUBLE-STRUCK",
    "mathfrak": "FRAKTUR", "boldsymbol": "BOLD ITALIC", "bm": "BOLD ITALIC",
    "mathrm": None,
}

# Letterlike characters that sit outside the Mathematical Alphanumeric block.
LETTERLIKE = {
    ("ITALIC", "h"): "ℎ",
    ("SCRIPT", "B"): "ℬ", ("SCRIPT", "E"): "ℰ", ("SCRIPT", "F"): "ℱ",
    ("SCRIPT", "H"): "ℋ", ("SCRIPT", "I"): "ℐ", ("SCRIPT", "L"): "ℒ",
    ("SCRIPT", "M"): "ℳ", ("SCRIPT", "R"): "ℛ", ("SCRIPT", "e"): "ℯ",
    ("SCRIPT", "g"): "ℊ", ("SCRIPT", "o"): "ℴ",
    ("FRAKTUR", "C"): "ℭ", ("FRAKTUR", "H"): "ℌ", ("FRAKTUR", "I"): "ℑ",
    ("FRAKTUR", "R"): "ℜ", ("FRAKTUR", "Z"): "ℨ",
    ("DOUBLE-STRUCK", "C"): "ℂ", ("DOUBLE-STRUCK", "H"): "ℍ",
    ("DOUBLE-STRUCK", "N"): "ℕ", ("DOUBLE-STRUCK", "P"): "ℙ",
    ("DOUBLE-STRUCK", "Q"): "ℚ", ("DOUBLE-STRUCK", "R"): "ℝ",
    ("DOUBLE-STRUCK", "Z"): "ℤ",
}

TEXT_COMMANDS = {"text", "mbox", "textrm", "textbf", "textit", "textsf", "texttt", "textnormal",
                 "hbox"}
SPACES = {",": "0.167em", ":": "0.222em", ">": "0.222em", ";": "0.278em", "!": "-0.167em",
          "quad": "1em", "qquad": "2em", " ": "0.333em", "~": "0.333em", "enspace": "0.5em"}
IGNORED = {"displaystyle", "textstyle", "scriptstyle", "scriptscriptstyle", "nonumber", "notag",
           "hline", "relax", "protect", "left.", "nolinebreak", "allowbreak", "label", "tag"}
ESCAPED_CHARS = {"&": OPERATOR, "%": OPERATOR, "#": IDENTIFIER, "$": IDENTIFIER, "_": IDENTIFIER}
CSS_UNITS = ("em", "ex", "pt", "px", "mm", "cm", "in", "pc")
BIG_SIZES = {"big": "1.2em", "Big": "1.623em", "bigg": "2.047em", "Bigg": "2.470em"}
CLASS_OVERRIDES = {"mathop": OPERATOR, "mathrel": OPERATOR, "mathbin": OPERATOR,
                   "mathord": IDENTIFIER, "mathpunct": OPERATOR, "mathopen": OPERATOR,
                   "mathclose": OPERATOR}

ARRAY_FENCES = {
    "matrix": None, "smallmatrix": None, "array": None, "aligned": None, "split": None,
    "gathered": None, "alignedat": None,
    "pmatrix": ("(", ")"), "bmatrix": ("[", "]"), "Bmatrix": ("{", "}"),
    "vmatrix": ("|", "|"), "Vmatrix": ("‖", "‖"), "cases": ("{", ""),
}


def font_char(ch: str, style: str) -> str:
    """Map one character into the Unicode mathematical alphabet ``style``."""
    if (style, ch) in LETTERLIKE:
        return LETTERLIKE[(style, ch)]
    try:
        name = unicodedata.name(ch)
    except ValueError:
        return ch
    if name.startswith("LATIN ") and "LETTER" in name:
        rest = name.replace("LATIN ", "").replace("LETTER ", "")
    elif name.startswith("GREEK ") and "LETTER" in name:
        rest = name.replace("GREEK ", "").replace("LETTER ", "").replace("LAMDA", "LAMDA")
        if style in ("DOUBLE-STRUCK", "SCRIPT", "FRAKTUR", "MONOSPACE"):
            return ch
    elif name.startswith("DIGIT "):
        rest = name
        if style == "BOLD ITALIC":
            style = "BOLD"
        if style in ("ITALIC", "SCRIPT", "FRAKTUR"):
            return ch
    else:
        return ch
    for candidate in (f"MATHEMATICAL {style} {rest}", f"{style} {rest}"):
        try:
            return unicodedata.lookup(candidate)
        except KeyError:
            continue
    return ch


def classify_atom(token: Token, diagnostics: Optional[List[Diagnostic]] = None) -> Atom:
    """Atom for a single character or known math control sequence."""
    table = assets.operator_table()
    if token.kind == CS:
        key = "\\" + token.text
        entry = table.get(key)
        if entry is not None:
            return Atom(entry.text, entry.cls, span=token.span)
        if token.text in ESCAPED_CHARS:
            return Atom(token.text, ESCAPED_CHARS[token.text], span=token.span)
        if diagnostics is not None:
            diagnostics.append(error("unknown-math-command", f"\\{token.text} is not a known math command",
                                     token.span))
        return Atom(key, IDENTIFIER, span=token.span)
    ch = token.text
    entry = table.get(ch)
    if entry is not None:
        return Atom(entry.text, entry.cls, span=token.span)
    cat = unicodedata.category(ch[:1]) if ch else "Cn"
    if cat.startswith("L"):
        return Atom(ch, IDENTIFIER, span=token.span)
    if cat == "Nd":
        return Atom(ch, NUMBER, span=token.span)
    return Atom(ch, OPERATOR, span=token.span)


# -- parser -----------------------------------------------------------------

def _is_space(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.SPACE


def _bg(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP


def _eg(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.END_GROUP


_EMPTY = Row(())


class _Parser:
    def __init__(self, tokens: Sequence[Token], display: bool):
        self.toks = [t for t in tokens if t.kind != PARAM]
        self.i = 0
        self.display = display
        self.diags: List[Diagnostic] = []

    def peek(self) -> Optional[Token]:
        while self.i < len(self.toks) and _is_space(self.toks[self.i]):
            self.i += 1
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self) -> Optional[Token]:
        t = self.peek()
        if t is not None:
            self.i += 1
        return t

    # rows, arrays and infix fractions

    def parse_seq(self, stop) -> MathExpr:
        """Parse until ``stop(token)`` is true (the stop token is not consumed)."""
        rows: List[List[MathExpr]] = []
        cells: List[MathExpr] = []
        items: List[MathExpr] = []
        infix: Optional[Tuple[str, List[MathExpr]]] = None
        tabular = False
        while True:
            t = self.peek()
            if t is None or stop(t):
                break
            if t.kind == CHAR and t.cat == Catcode.ALIGNMENT:
                self.i += 1
                cells.append(_unwrap(self._close_row(items, infix)))
                items, infix, tabular = [], None, True
                continue
            if t.kind == CS and t.text in ("\\", "cr"):
                self.i += 1
                self._skip_row_spacing()
                cells.append(_unwrap(self._close_row(items, infix)))
                rows.append(cells)
                cells, items, infix, tabular = [], [], None, True
                continue
            if t.kind == CS and t.text in INFIX:
                self.i += 1
                if infix is not None:
                    self.diags.append(error("ambiguous-fraction", f"second \\{t.text} in one group", t.span))
                    items = [self._close_row(items, infix)]
                infix = (t.text, items)
                items = []
                continue
            item = self.parse_scripted()
            if item is not None:
                items.append(item)
        if not tabular:
            return self._close_row(items, infix)
        cells.append(_unwrap(self._close_row(items, infix)))
        rows.append(cells)
        if len(rows) > 1 and all(c == _EMPTY for c in rows[-1]):
            rows.pop()
        return self._pad(rows)

    def _skip_row_spacing(self):
        t = self.peek()
        if t is not None and t.is_char(text="["):
            while self.i < len(self.toks) and not self.toks[self.i].is_char(text="]"):
                self.i += 1
            self.i += 1

    def _close_row(self, items, infix) -> MathExpr:
        row = _row(items)
        if infix is None:
            return row
        kind, left = infix
        num = _row(left)
        if kind == "choose":
            return Fenced(Atom("(", OPERATOR, True), Row((Fraction(num, row, False),)),
                          Atom(")", OPERATOR, True))
        return Fraction(num, row, kind == "over")

    def _pad(self, rows: List[List[MathExpr]]) -> Array:
        width = max(len(r) for r in rows)
        if any(len(r) != width for r in rows):
            self.diags.append(warning("ragged-rows", f"array rows padded to {width} cells"))
        return Array(tuple(tuple(r) + (_EMPTY,) * (width - len(r)) for r in rows))

    # scripts

    def parse_scripted(self) -> Optional[MathExpr]:
        base = self.parse_primary()
        if base is None:
            return None
        sub = sup = None
        limits_override = None
        while True:
            t = self.peek()
            if t is None:
                break
            if t.kind == CS and t.text in ("limits", "nolimits"):
                self.i += 1
                limits_override = t.text == "limits"
                continue
            if t.kind == CHAR and t.cat in (Catcode.SUPERSCRIPT, Catcode.SUBSCRIPT):
                self.i += 1
                arg = self.parse_script_arg(t)
                if t.cat == Catcode.SUPERSCRIPT:
                    if sup is not None:
                        self.diags.append(error("double-superscript", "double superscript", t.span))
                        base, sub, sup = self._script(base, sub, sup, limits_override), None, None
                    sup = arg
                else:
                    if sub is not None:
                        self.diags.append(error("double-subscript", "double subscript", t.span))
                        base, sub, sup = self._script(base, sub, sup, limits_override), None, None
                    sub = arg
                continue
            if t.is_char(text="'"):
                primes = ""
                while self.peek() is not None and self.peek().is_char(text="'"):
                    self.i += 1
                    primes += "′"
                prime = Atom(primes, OPERATOR, span=t.span)
                if sup is not None:
                    sup = Row((prime, *(_children(sup))))
                else:
                    sup = prime
                continue
            break
        if sub is None and sup is None:
            if isinstance(base, BigOperator) and limits_override is not None:
                return BigOperator(base.op, base.under, base.over, limits_override)
            return base
        return self._script(base, sub, sup, limits_override)

    def _script(self, base, sub, sup, limits_override) -> MathExpr:
        if sub is None and sup is None:
            return base
        if isinstance(base, BigOperator) and base.under is None and base.over is None:
            limits = base.limits if limits_override is None else limits_override
            return BigOperator(base.op, sub, sup, limits)
        return Script(base, sub, sup)

    def parse_script_arg(self, op: Token) -> MathExpr:
        t = self.peek()
        if t is None or _eg(t) or (t.kind == CHAR and t.cat in (Catcode.SUPERSCRIPT, Catcode.SUBSCRIPT,
                                                                  Catcode.ALIGNMENT)):
            self.diags.append(error("missing-script-argument", "script without an argument", op.span))
            return _EMPTY
        if t.kind == CS and t.text in ("\\",):
            self.diags.append(error("missing-script-argument", "script without an argument", op.span))
            return _EMPTY
        if t.kind == CHAR and t.cat == Catcode.OTHER and t.text.isdigit():
            # a script takes a single digit, not the whole run
            self.i += 1
            return Atom(t.text, NUMBER, span=t.span)
        r = self.parse_primary()
        return _EMPTY if r is None else r

    # primaries

    def parse_group(self) -> MathExpr:
        """Parse ``{...}`` after the opening brace has been consumed."""
        open_tok = self.toks[self.i - 1]
        body = self.parse_seq(_eg)
        if self.peek() is None:
            self.diags.append(error("unbalanced-group", "missing } in math", open_tok.span))
        else:
            self.i += 1
        return body

    def parse_arg(self) -> MathExpr:
        t = self.peek()
        if t is None:
            self.diags.append(error("missing-argument", "missing argument in math"))
            return _EMPTY
        if _bg(t):
            self.i += 1
            return _unwrap(self.parse_group())
        if _eg(t):
            self.diags.append(error("missing-argument", "missing argument in math", t.span))
            return _EMPTY
        r = self.parse_primary()
        return _EMPTY if r is None else r

    def raw_group(self) -> List[Token]:
        t = self.peek()
        if t is None:
            return []
        if not _bg(t):
            self.i += 1
            return [t]
        self.i += 1
        out, level = [], 1
        while self.i < len(self.toks):
            x = self.toks[self.i]
            self.i += 1
            if _bg(x):
                level += 1
            elif _eg(x):
                level -= 1
                if level == 0:
                    return out
            out.append(x)
        self.diags.append(error("unbalanced-group", "missing } in math", t.span))
        return out

    def hspace(self, t: Token, arg: str) -> Optional[MathExpr]:
        m = re.fullmatch(r"\s*([+-]?(?:\d+\.?\d*|\.\d+))\s*([a-z]{2})\s*", arg)
        if m is None or m.group(2) not in CSS_UNITS + ("mu",):
            self.diags.append(error("invalid-length", f"cannot use {arg.strip()!r} as a length", t.span))
            return None
        num, unit = float(m.group(1)), m.group(2)
        if unit == "mu":  # 18mu = 1em
            num, unit = num / 18, "em"
        return Space(f"{num:g}{unit}")

    def optional_tokens(self) -> Optional[List[Token]]:
        t = self.peek()
        if t is None or not t.is_char(text="["):
            return None
        self.i += 1
        out, level = [], 0
        while self.i < len(self.toks):
            x = self.toks[self.i]
            self.i += 1
            if _bg(x):
                level += 1
            elif _eg(x):
                level -= 1
            elif x.is_char(text="]") and level == 0:
                return out
            out.append(x)
        return out

    def parse_primary(self) -> Optional[MathExpr]:
        t = self.take()
        if t is None:
            return None
        if t.kind == MARKER:
            return TextInMath("\\" + t.text, span=t.span)
        if t.kind == CHAR:
            return self.char_primary(t)
        return self.command(t)

    def char_primary(self, t: Token) -> Optional[MathExpr]:
        cat = t.cat
        if cat == Catcode.BEGIN_GROUP:
            return _unwrap(self.parse_group())
        if cat == Catcode.END_GROUP:
            self.diags.append(error("unbalanced-group", "extra } in math", t.span))
            return None
        if cat in (Catcode.SUPERSCRIPT, Catcode.SUBSCRIPT):
            arg = self.parse_script_arg(t)
            if cat == Catcode.SUPERSCRIPT:
                return Script(_EMPTY, None, arg)
            return Script(_EMPTY, arg, None)
        if cat == Catcode.ACTIVE:
            if t.text == "~":
                return Space(SPACES["~"])
            return Atom(t.text, OPERATOR, span=t.span)
        if cat == Catcode.MATH_SHIFT:
            self.diags.append(error("misplaced-math-shift", "$ inside math", t.span))
            return Atom("$", OPERATOR, span=t.span)
        if cat in (Catcode.PARAMETER, Catcode.ALIGNMENT):
            return Atom(t.text, OPERATOR, span=t.span)
        if t.text.isdigit() or (t.text == "." and self._digit_next()):
            return self.number(t)
        if t.is_char(text="'"):
            return Atom("′", OPERATOR, span=t.span)
        a = classify_atom(t, self.diags)
        if a.cls == OPERATOR and a.text in "()[]|":
            return Atom(a.text, OPERATOR, False, span=t.span)
        return a

    def _digit_next(self) -> bool:
        return self.i < len(self.toks) and self.toks[self.i].kind == CHAR and self.toks[self.i].text.isdigit()

    def number(self, t: Token) -> Atom:
        text = t.text
        end = t.end
        seen_dot = text == "."
        while self.i < len(self.toks):
            x = self.toks[self.i]
            if x.kind != CHAR or x.cat != Catcode.OTHER:
                break
            if x.text.isdigit():
                text += x.text
            elif x.text == "." and not seen_dot and self.i + 1 < len(self.toks) \
                    and self.toks[self.i + 1].kind == CHAR and self.toks[self.i + 1].text.isdigit():
                seen_dot = True
                text += "."
            else:
                break
            end = x.end
            self.i += 1
        return Atom(text, NUMBER, span=(t.start, end))

    def delimiter(self, cmd: Token) -> Atom:
        t = self.take()
        if t is None:
            self.diags.append(error("missing-delimiter", f"\\{cmd.text} without a delimiter", cmd.span))
            return Atom("", OPERATOR, True)
        if t.kind == CHAR and t.text == ".":
            return Atom("", OPERATOR, True, span=t.span)
        if t.kind == CHAR and t.cat not in (Catcode.BEGIN_GROUP, Catcode.END_GROUP):
            a = classify_atom(t)
            return Atom(a.text, OPERATOR, True, span=t.span)
        if t.kind == CS:
            a = classify_atom(t, self.diags)
            return Atom(a.text, OPERATOR, True, span=t.span)
        self.diags.append(error("bad-delimiter", f"missing delimiter after \\{cmd.text}", cmd.span))
        self.i -= 1
        return Atom("", OPERATOR, True)

    def command(self, t: Token) -> Optional[MathExpr]:
        name = t.text
        if name in FRACTIONS:
            num = self.parse_arg()
            den = self.parse_arg()
            return Fraction(num, den, True)
        if name in BINOMS:
            num = self.parse_arg()
            den = self.parse_arg()
            return Fenced(Atom("(", OPERATOR, True), Row((Fraction(num, den, False),)), Atom(")", OPERATOR, True))
        if name == "sqrt":
            idx = self.optional_tokens()
            index = None
            if idx is not None:
                sub = _Parser(idx, self.display)
                index = _unwrap(sub.parse_seq(lambda _t: False))
                self.diags.extend(sub.diags)
            return Radical(self.parse_arg(), index)
        if name == "left":
            return self.fenced(t)
        if name in ("right", "middle"):
            self.diags.append(error("unmatched-fence", f"\\{name} without \\left", t.span))
            d = self.delimiter(t)
            return Atom(d.text, OPERATOR, True, span=t.span)
        base = name.rstrip("lrm")
        if base in BIG_SIZES and name in _BIG_NAMES:
            d = self.delimiter(t)
            size = BIG_SIZES[base]
            return Atom(d.text, OPERATOR, True, size, span=t.span)
        if name in SUM_CLASS or name in LIM_CLASS or name in INT_CLASS:
            op = classify_atom(t)
            limits = self.display and name not in INT_CLASS
            return BigOperator(op, None, None, limits)
        if name in ACCENT_MARKS:
            mark, under = ACCENT_MARKS[name]
            body = self.parse_arg()
            return Accent(body, Atom(mark, OPERATOR, True if name.startswith(("wide", "over", "under")) else None),
                          under, True)
        if name in ("overset", "stackrel", "underset"):
            top = self.parse_arg()
            body = self.parse_arg()
            return Accent(body, top, name == "underset", False)
        if name in FONT_STYLES:
            return self.font(FONT_STYLES[name], self.raw_group())
        if name in TEXT_COMMANDS:
            return TextInMath(_text_of(self.raw_group()), span=t.span)
        if name == "operatorname":
            star = self.peek() is not None and self.peek().is_char(text="*")
            if star:
                self.i += 1
            text = _text_of(self.raw_group()).strip()
            atom = Atom(text, IDENTIFIER, variant="normal" if len(text) == 1 else None, span=t.span)
            if star:
                return BigOperator(atom, None, None, self.display)
            return atom
        if name in SPACES:
            return Space(SPACES[name])
        if name == "phantom":
            return Space("0em", self.parse_arg())
        if name == "hspace":
            if self.peek() is not None and self.peek().is_char(text="*"):
                self.i += 1
            return self.hspace(t, _text_of(self.raw_group()))
        if name in CLASS_OVERRIDES:
            arg = self.parse_arg()
            if isinstance(arg, Atom):
                return Atom(arg.text, CLASS_OVERRIDES[name], arg.stretchy, arg.size, arg.variant, arg.span)
            return arg
        if name == "substack":
            sub = _Parser(self.raw_group(), False)
            body = sub.parse_seq(lambda _t: False)
            self.diags.extend(sub.diags)
            if not isinstance(body, Array):
                body = Array(((body,),))
            return body
        if name == "begin":
            return self.environment(t)
        if name == "end":
            self.raw_group()
            self.diags.append(error("unbalanced-environment", "\\end without \\begin in math", t.span))
            return None
        if name in IGNORED:
            if name in ("label", "tag"):
                self.raw_group()
            return None
        if name in ("(", ")", "[", "]"):
            self.diags.append(error("nested-math", f"\\{name} inside math", t.span))
            return None
        if name == "\\":
            return None
        return classify_atom(t, self.diags)

    def font(self, style: Optional[str], toks: List[Token]) -> MathExpr:
        sub = _Parser(toks, self.display)
        body = sub.parse_seq(lambda _t: False)
        self.diags.extend(sub.diags)
        items = list(_children(body))
        if style is None:
            # upright: merge letter runs into single identifiers
            merged: List[MathExpr] = []
            for it in items:
                if isinstance(it, Atom) and it.cls == IDENTIFIER and merged and isinstance(merged[-1], Atom) \
                        and merged[-1].cls == IDENTIFIER and merged[-1].variant == "normal":
                    prev = merged.pop()
                    merged.append(Atom(prev.text + it.text, IDENTIFIER, variant="normal", span=prev.span))
                elif isinstance(it, Atom) and it.cls == IDENTIFIER:
                    merged.append(Atom(it.text, IDENTIFIER, variant="normal", span=it.span))
                else:
                    merged.append(it)
            out = [Atom(a.text, a.cls, a.stretchy, a.size,
                        "normal" if len(a.text) == 1 else None, a.span)
                   if isinstance(a, Atom) and a.cls == IDENTIFIER else a for a in merged]
            return _unwrap(_row(out))
        return _unwrap(_row([_restyle(it, style) for it in items]))

    def fenced(self, t: Token) -> MathExpr:
        open_ = self.delimiter(t)
        items: List[MathExpr] = []

        def stop(x: Token) -> bool:
            return x.kind == CS and x.text in ("right", "middle")

        while True:
            body = self.parse_seq(stop)
            items.extend(_children(body) if isinstance(body, Row) else (body,))
            nxt = self.peek()
            if nxt is None:
                self.diags.append(error("unmatched-fence", "\\left without \\right", t.span))
                return Fenced(open_, Row(tuple(items)), Atom("", OPERATOR, True))
            self.i += 1
            if nxt.text == "middle":
                d = self.delimiter(nxt)
                items.append(d)
                continue
            close = self.delimiter(nxt)
            return Fenced(open_, Row(tuple(items)), close)

    def environment(self, t: Token) -> Optional[MathExpr]:
        name = _text_of(self.raw_group()).strip()
        body: List[Token] = []
        level = 1
        while self.i < len(self.toks):
            x = self.toks[self.i]
            self.i += 1
            if x.kind == CS and x.text in ("begin", "end"):
                save = self.i
                inner = _text_of(self.raw_group()).strip()
                if inner == name:
                    level += 1 if x.text == "begin" else -1
                    if level == 0:
                        break
                body.append(x)
                body.extend(self.toks[save:self.i])
                continue
            body.append(x)
        else:
            self.diags.append(error("unterminated-environment", f"\\begin{{{name}}} never ended in math", t.span))
        expr, diags = parse_array(body, env=name, display=self.display)
        self.diags.extend(diags)
        return expr


_BIG_NAMES = {n + s for n in BIG_SIZES for s in ("", "l", "r", "m")}


def _text_of(toks: Sequence[Token]) -> str:
    out = []
    for t in toks:
        if t.kind == CHAR:
            if t.cat == Catcode.SPACE:
                if not out or out[-1] != " ":
                    out.append(" ")
            elif t.cat in (Catcode.BEGIN_GROUP, Catcode.END_GROUP, Catcode.MATH_SHIFT):
                continue
            elif t.cat == Catcode.ACTIVE and t.text == "~":
                out.append(" ")
            else:
                out.append(t.text)
        elif t.kind == CS:
            entry = assets.operator_table().get("\\" + t.text)
            if entry is not None:
                out.append(entry.text)
            elif t.text in ("{", "}", "%", "&", "#", "$", "_"):
                out.append(t.text)
            elif t.text == " ":
                out.append(" ")
        elif t.kind == MARKER:
            out.append("\\" + t.text)
    return "".join(out)


def _restyle(e: MathExpr, style: str) -> MathExpr:
    if isinstance(e, Atom) and e.cls in (IDENTIFIER, NUMBER):
        return Atom("".join(font_char(c, style) for c in e.text), e.cls, e.stretchy, e.size, None, e.span)
    if isinstance(e, Row):
        return Row(tuple(_restyle(c, style) for c in e.children))
    if isinstance(e, Script):
        return Script(_restyle(e.base, style), e.sub, e.sup)
    return e


def _children(e: MathExpr) -> Tuple[MathExpr, ...]:
    return e.children if isinstance(e, Row) else (e,)


def _row(items: List[MathExpr]) -> MathExpr:
    return Row(tuple(items))


def _unwrap(e: MathExpr) -> MathExpr:
    if isinstance(e, Row) and len(e.children) == 1:
        return e.children[0]
    return e


def _fallback(tokens: Sequence[Token]) -> Row:
    items: List[MathExpr] = []
    for t in tokens:
        if _is_space(t):
            continue
        if t.kind == MARKER:
            items.append(TextInMath("\\" + t.text, span=t.span))
        elif t.kind == CS:
            items.append(Atom("\\" + t.text, IDENTIFIER, span=t.span))
        else:
            items.append(Atom(t.text, OPERATOR, span=t.span))
    return Row(tuple(items))


def parse_math(tokens: Sequence[Token], display: bool = False) -> Tuple[MathExpr, List[Diagnostic]]:
    """Parse a math token list; never raises."""
    p = _Parser(tokens, display)
    try:
        expr = p.parse_seq(lambda _t: False)
        while p.i < len(p.toks):
            # stray closing braces stop a sequence; report and continue past them
            t = p.toks[p.i]
            p.i += 1
            p.diags.append(error("unbalanced-group", "extra } in math", t.span))
            rest = p.parse_seq(lambda _t: False)
            expr = Row(_children(expr) + _children(rest))
        return _unwrap(expr), p.diags
    except (RecursionError, ValueError, IndexError, KeyError) as exc:
        return _fallback(tokens), p.diags + [error("math-parse-failure", f"math degraded to atoms: {exc!r}")]


def parse_array(tokens: Sequence[Token], column_spec: Optional[str] = None, *, env: Optional[str] = None,
                display: bool = False) -> Tuple[MathExpr, List[Diagnostic]]:
    """Parse an array-like environment body into rows of cells.

    ``tokens`` may be a bare body (with ``env`` naming the environment) or a
    complete ``\\begin{...} ... \\end{...}`` token list.
    """
    toks = list(tokens)
    diags: List[Diagnostic] = []
    while toks and _is_space(toks[0]):
        toks.pop(0)
    if toks and toks[0].is_cs("begin"):
        p = _Parser(toks, display)
        p.i = 1
        env = _text_of(p.raw_group()).strip()
        body = toks[p.i:]
        # drop the trailing \end{env}
        for k in range(len(body) - 1, -1, -1):
            if body[k].is_cs("end"):
                body = body[:k]
                break
        toks = body
    p = _Parser(toks, display)
    if env in ("array", "alignedat") or (env == "array" and column_spec is None):
        spec = p.raw_group() if p.peek() is not None and _bg(p.peek()) else []
        if column_spec is None:
            column_spec = _text_of(spec)
    elif env in ("aligned", "split", "gathered"):
        p.optional_tokens()
    try:
        body = p.parse_seq(lambda _t: False)
    except (RecursionError, ValueError, IndexError, KeyError) as exc:
        body = _fallback(toks)
        p.diags.append(error("math-parse-failure", f"array degraded to atoms: {exc!r}"))
    diags.extend(p.diags)
    while p.i < len(p.toks):
        p.i += 1
        diags.append(error("unbalanced-group", "extra } in array"))
    arr = body if isinstance(body, Array) else Array(((body,),))
    if env is not None and env not in ARRAY_FENCES:
        diags.append(warning("unknown-math-environment", f"{{{env}}} treated as a plain array"))
    fences = ARRAY_FENCES.get(env) if env else None
    if fences is None:
        return arr, diags
    return Fenced(Atom(fences[0], OPERATOR, True), Row((arr,)), Atom(fences[1], OPERATOR, True)), diags


def iter_expr(e: MathExpr):
    """Pre-order iteration over an expression tree."""
    yield e
    if isinstance(e, Row):
        for c in e.children:
            yield from iter_expr(c)
    elif isinstance(e, Script):
        yield from iter_expr(e.base)
        if e.sub is not None:
            yield from iter_expr(e.sub)
        if e.sup is not None:
            yield from iter_expr(e.sup)
    elif isinstance(e, Fraction):
        yield from iter_expr(e.num)
        yield from iter_expr(e.den)
    elif isinstance(e, Radical):
        yield from iter_expr(e.radicand)
        if e.index is not None:
            yield from iter_expr(e.index)
    elif isinstance(e, Fenced):
        yield e.open
        yield from iter_expr(e.body)
        yield e.close
    elif isinstance(e, BigOperator):
        yield e.op
        if e.under is not None:
            yield from iter_expr(e.under)
        if e.over is not None:
            yield from iter_expr(e.over)
    elif isinstance(e, Accent):
        yield from iter_expr(e.base)
        yield from iter_expr(e.mark)
    elif isinstance(e, Array):
        for row in e.rows:
            for c in row:
                yield from iter_expr(c)
    elif isinstance(e, Space) and e.phantom is not None:
        yield from iter_expr(e.phantom)
