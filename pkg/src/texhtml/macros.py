"""Macro expansion and the bounded set of TeX/LaTeX primitives.

The expander pulls tokens from a :class:`~texhtml.tokenizer.Lexer` (or a plain
token list), expands user and builtin macros, executes definitions, grouping,
environments and the supported conditionals, and passes everything else
through for the document model.  Undefined control sequences never abort:
they become ``marker`` tokens and are tallied.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from . import assets
from .diagnostics import (
    Diagnostic, ExpansionDepthExceeded, MalformedPattern, Span, ConversionTimeout,
    error, info, warning,
)
from .tokenizer import (
    CHAR, CS, MARKER, PARAM, Catcode, CatcodeTable, Lexer, Token, STATE_MID_LINE,
    default_catcodes, detokenize, tokenize,
)

DEFAULT_DEPTH_LIMIT = 10_000

DOCUMENT = "document"
BUILTIN = "builtin"
PACKAGE = "package-binding"


# -- bindings ----------------------------------------------------------------

@dataclass(frozen=True)
class MacroDefinition:
    name: str
    pattern: Tuple[Union[int, Token], ...]
    body: Tuple[Token, ...]
    long: bool = False
    origin: str = DOCUMENT
    optional_default: Optional[Tuple[Token, ...]] = None

    @property
    def arity(self) -> int:
        return sum(1 for p in self.pattern if isinstance(p, int))

    def same_meaning(self, other: "MacroDefinition") -> bool:
        return (self.long == other.long
                and _meanings(self.pattern) == _meanings(other.pattern)
                and _meanings(self.body) == _meanings(other.body)
                and _opt_meaning(self.optional_default) == _opt_meaning(other.optional_default))


def _meanings(items):
    return tuple(p if isinstance(p, int) else p.meaning for p in items)


def _opt_meaning(toks):
    return None if toks is None else _meanings(toks)


class Primitive(NamedTuple):
    name: str
    handler: str
    origin: str = BUILTIN
    conditional: bool = False


class Unexpandable(NamedTuple):
    """A builtin consumed later by the document model or math grammar."""

    name: str
    origin: str = BUILTIN


class CharAlias(NamedTuple):
    token: Token
    origin: str = DOCUMENT


Binding = Union[MacroDefinition, Primitive, Unexpandable, CharAlias]


@dataclass(frozen=True)
class EnvironmentDefinition:
    name: str
    kind: str  # structural | math | math-inner | theorem | user | verbatim | table | comment
    origin: str = BUILTIN
    pattern: Tuple[Union[int, Token], ...] = ()
    begin: Tuple[Token, ...] = ()
    end: Tuple[Token, ...] = ()
    optional_default: Optional[Tuple[Token, ...]] = None
    label: Optional[str] = None
    counter: Optional[str] = None


@dataclass
class MissingMacroRecord:
    name: str
    count: int
    first_span: Optional[Span]

    def to_json(self) -> dict:
        return {"name": self.name, "count": self.count,
                "first_span": list(self.first_span) if self.first_span else None}


class MarkerInfo(NamedTuple):
    """Payload of a marker token.

    kind is ``undefined`` (unknown control sequence), ``environment``
    (unknown environment), ``conditional`` (unsupported conditional region),
    ``table`` (tabular routed to the fallback dialect) or ``verbatim``.
    """

    kind: str
    verbatim: Optional[str] = None
    inner: Optional[Span] = None
    tokens: Tuple[Token, ...] = ()
    extra: Optional[str] = None


def _env_key(name: str) -> str:
    return "{" + name + "}"


class ScopeStack:
    """Frames of bindings and catcode overrides; frame 0 is global."""

    def __init__(self, global_frame: Optional[Dict[str, object]] = None):
        self.frames: List[Dict[str, object]] = [dict(global_frame or {})]
        self.catcode_frames: List[Dict[int, int]] = [{}]

    @property
    def depth(self) -> int:
        return len(self.frames)

    def lookup(self, key: str):
        for frame in reversed(self.frames):
            if key in frame:
                return frame[key]
        return None

    def bind(self, key: str, value, global_: bool = False) -> None:
        if global_:
            for frame in self.frames[1:]:
                frame.pop(key, None)
            self._set(self.frames[0], key, value)
        else:
            self._set(self.frames[-1], key, value)

    @staticmethod
    def _set(frame, key, value):
        if value is None:
            frame[key] = None
        else:
            frame[key] = value

    def push(self) -> None:
        self.frames.append({})
        self.catcode_frames.append({})

    def pop(self) -> Dict[int, int]:
        """Drop the innermost frame; returns the catcodes it had overridden."""
        if len(self.frames) == 1:
            raise IndexError("cannot pop the global frame")
        self.frames.pop()
        return self.catcode_frames.pop()


@dataclass
class MacroState:
    scopes: ScopeStack
    catcodes: CatcodeTable = field(default_factory=default_catcodes)
    depth_limit: int = DEFAULT_DEPTH_LIMIT
    packages: List[str] = field(default_factory=list)

    def lookup(self, name: str) -> Optional[Binding]:
        b = self.scopes.lookup(name)
        return b if b is not None else None

    def lookup_env(self, name: str) -> Optional[EnvironmentDefinition]:
        return self.scopes.lookup(_env_key(name))

    def copy(self) -> "MacroState":
        st = MacroState(ScopeStack(), self.catcodes.copy(), self.depth_limit, list(self.packages))
        st.scopes.frames = [dict(f) for f in self.scopes.frames]
        st.scopes.catcode_frames = [dict(f) for f in self.scopes.catcode_frames]
        return st

    def names(self, origin: Optional[str] = None) -> List[str]:
        seen = {}
        for frame in self.scopes.frames:
            for k, v in frame.items():
                if v is None:
                    seen.pop(k, None)
                else:
                    seen[k] = v
        return sorted(k for k, v in seen.items()
                      if origin is None or getattr(v, "origin", None) == origin)


# -- definitions -------------------------------------------------------------

def _as_tokens(x) -> List[Token]:
    if isinstance(x, str):
        return tokenize(x)
    return list(x)


def parse_parameter_text(tokens: Sequence[Token]) -> Tuple[Union[int, Token], ...]:
    """Convert ``#1#2``-style parameter text into slots and delimiters."""
    out: List[Union[int, Token]] = []
    expected = 1
    i = 0
    n = len(tokens)
    while i < n:
        t = tokens[i]
        if t.kind == PARAM:
            idx = int(t.text)
            if idx != expected:
                raise MalformedPattern(f"parameters must be numbered consecutively (got #{idx})", t.span)
            out.append(idx)
            expected += 1
            i += 1
            continue
        if t.kind == CHAR and t.cat == Catcode.PARAMETER:
            if i + 1 >= n:
                raise MalformedPattern("parameter character at end of parameter text", t.span)
            d = tokens[i + 1]
            if d.kind == CHAR and d.text.isdigit() and d.text != "0":
                idx = int(d.text)
                if idx != expected:
                    raise MalformedPattern(
                        f"parameters must be numbered consecutively (got #{idx})", d.span)
                out.append(idx)
                expected += 1
                i += 2
                continue
            raise MalformedPattern("illegal parameter text", t.span)
        out.append(t)
        i += 1
    if expected - 1 > 9:
        raise MalformedPattern("more than nine parameters")
    return tuple(out)


def parse_body(tokens: Sequence[Token], arity: int) -> Tuple[Token, ...]:
    """Turn ``#n`` pairs into PARAM tokens and ``##`` into a literal ``#``."""
    out: List[Token] = []
    i = 0
    n = len(tokens)
    while i < n:
        t = tokens[i]
        if t.kind == PARAM:
            if int(t.text) > arity:
                raise MalformedPattern(f"illegal parameter number #{t.text}", t.span)
            out.append(t)
            i += 1
            continue
        if t.kind == CHAR and t.cat == Catcode.PARAMETER and i + 1 < n:
            d = tokens[i + 1]
            if d.kind == CHAR and d.cat == Catcode.PARAMETER:
                out.append(d)
                i += 2
                continue
            if d.kind == CHAR and d.text.isdigit() and d.text != "0":
                if int(d.text) > arity:
                    raise MalformedPattern(f"illegal parameter number #{d.text}", d.span)
                out.append(Token(PARAM, d.text, Catcode.PARAMETER, t.start, d.end))
                i += 2
                continue
            raise MalformedPattern("illegal parameter reference", t.span)
        if t.kind == CHAR and t.cat == Catcode.PARAMETER:
            raise MalformedPattern("parameter character at end of body", t.span)
        out.append(t)
        i += 1
    return tuple(out)


def define(state: MacroState, name: str, pattern, body, global_: bool = False, *,
           long: bool = False, origin: str = DOCUMENT,
           optional_default: Optional[Sequence[Token]] = None) -> MacroState:
    """Bind ``name`` in the current frame (or globally) and return ``state``.

    ``pattern`` may be parameter text (string or tokens) or a prepared tuple
    of slot numbers and delimiter tokens; ``body`` may use ``#n`` or PARAM
    tokens.
    """
    if isinstance(pattern, str) or (pattern and isinstance(pattern[0], Token)) or not pattern:
        pat = parse_parameter_text(_as_tokens(pattern)) if pattern else ()
    else:
        pat = tuple(pattern)
        slots = [p for p in pat if isinstance(p, int)]
        if slots != list(range(1, len(slots) + 1)) or len(slots) > 9:
            raise MalformedPattern(f"bad parameter slots {slots}")
    arity = sum(1 for p in pat if isinstance(p, int))
    parsed = parse_body(_as_tokens(body), arity)
    opt = tuple(_as_tokens(optional_default)) if optional_default is not None else None
    state.scopes.bind(name, MacroDefinition(name, pat, parsed, long, origin, opt), global_)
    return state


# -- builtin inventory -------------------------------------------------------

# Primitive control sequences executed by the expander.
PRIMITIVES = {
    "def": "_p_def", "gdef": "_p_def", "edef": "_p_def", "xdef": "_p_def",
    "global": "_p_prefix", "long": "_p_prefix", "outer": "_p_prefix", "protected": "_p_prefix",
    "let": "_p_let", "relax": "_p_relax",
    "newcommand": "_p_newcommand", "renewcommand": "_p_newcommand",
    "providecommand": "_p_newcommand", "DeclareRobustCommand": "_p_newcommand",
    "DeclareMathOperator": "_p_declaremathoperator",
    "newenvironment": "_p_newenvironment", "renewenvironment": "_p_newenvironment",
    "newtheorem": "_p_newtheorem",
    "begin": "_p_begin", "end": "_p_end",
    "begingroup": "_p_begingroup", "endgroup": "_p_endgroup",
    "csname": "_p_csname", "endcsname": "_p_relax",
    "expandafter": "_p_expandafter", "noexpand": "_p_noexpand",
    "catcode": "_p_catcode", "makeatletter": "_p_makeat", "makeatother": "_p_makeat",
    "documentclass": "_p_documentclass", "usepackage": "_p_usepackage",
    "RequirePackage": "_p_usepackage",
    "ensuremath": "_p_ensuremath", "verb": "_p_verb", "url": "_p_url", "href": "_p_url",
    "input": "_p_input", "include": "_p_input",
}

CONDITIONALS = {"ifx": "_p_ifx", "ifmmode": "_p_ifmmode", "else": "_p_else", "fi": "_p_fi"}

# Conditionals outside the supported subset; their guarded region becomes a
# fallback blob.
UNSUPPORTED_CONDITIONALS = (
    "if", "ifcat", "ifnum", "ifdim", "ifodd", "ifvmode", "ifhmode", "ifinner",
    "ifvoid", "ifhbox", "ifvbox", "ifeof", "iftrue", "iffalse", "ifcase",
    "ifdefined", "ifcsname", "iffontchar", "ifincsname",
)

# Unexpandable commands interpreted by the document model.
STRUCTURAL = (
    "par", "section", "subsection", "subsubsection", "paragraph", "subparagraph",
    "emph", "textbf", "textit", "texttt", "textrm", "textsf", "textsc", "textup",
    "textmd", "textnormal", "textsl", "underline", "em", "bf", "it", "tt", "rm", "sf",
    "sc", "sl", "bfseries", "itshape", "ttfamily", "rmfamily", "sffamily", "scshape",
    "upshape", "mdseries", "normalfont",
    "item", "label", "ref", "eqref", "pageref", "autoref", "cite", "citep", "citet",
    "footnote", "footnotemark", "footnotetext",
    "title", "author", "and", "inst", "institute", "affiliation", "affil", "email",
    "thanks", "date", "maketitle", "orcidID", "keywords", "titlerunning",
    "authorrunning", "today", "address",
    "\\", "newline", "linebreak", "nolinebreak", "noindent", "indent", "centering",
    "raggedright", "raggedleft",
    "vspace", "hspace", "smallskip", "medskip", "bigskip", "vfill", "hfill",
    "clearpage", "newpage", "pagebreak", "nopagebreak", "protect", "null",
    "tableofcontents", "bibliographystyle", "bibliography", "appendix",
    "tiny", "scriptsize", "footnotesize", "small", "normalsize", "large", "Large",
    "LARGE", "huge", "Huge",
    "nonumber", "notag", "tag",
    "(", ")", "[", "]",
    "%", "&", "#", "$", "_", "{", "}", "textbackslash", "textasciitilde",
    "textasciicircum", "ldots", "dots", "S", "P", "copyright", "dag", "ddag", "pounds",
    "textemdash", "textendash", "textbullet", "slash", "ss", "o", "O", "ae", "AE",
    "aa", "AA", "l", "L", "i", "j", "oe", "OE", "textquoteleft", "textquoteright",
    "textquotedblleft", "textquotedblright", "textregistered", "texttrademark",
    "textdegree", "textperiodcentered", "@",
    "'", "`", "^", "\"", "~", "=", ".", "u", "v", "H", "c", "d", "b", "r", "t", "k",
    " ", "/", "hline", "cline", "toprule", "midrule", "bottomrule", "multicolumn",
)

# Active characters with a builtin meaning.
ACTIVE = ("~",)

BUILTIN_ENVIRONMENTS = {
    "document": "structural", "itemize": "structural", "enumerate": "structural",
    "description": "structural", "abstract": "structural", "quote": "structural",
    "quotation": "structural", "center": "structural", "flushleft": "structural",
    "flushright": "structural", "proof": "structural",
    "equation": "math", "equation*": "math", "align": "math", "align*": "math",
    "gather": "math", "gather*": "math", "multline": "math", "multline*": "math",
    "displaymath": "math", "math": "math", "eqnarray": "math", "eqnarray*": "math",
    "matrix": "math-inner", "pmatrix": "math-inner", "bmatrix": "math-inner",
    "Bmatrix": "math-inner", "vmatrix": "math-inner", "Vmatrix": "math-inner",
    "smallmatrix": "math-inner", "array": "math-inner", "cases": "math-inner",
    "aligned": "math-inner", "split": "math-inner", "gathered": "math-inner",
    "tabular": "structural", "tabular*": "structural",
    "verbatim": "verbatim", "verbatim*": "verbatim",
}

# Macros the builtin layer defines in TeX itself.
BUILTIN_MACROS = r"""
\def\LaTeX{LaTeX}\def\TeX{TeX}\def\LaTeXe{LaTeX2e}\def\space{ }\def\empty{}
\def\@empty{}\def\lq{`}\def\rq{'}\def\nobreakspace{~}\def\textellipsis{\ldots}
\def\cdotp{\cdot}\def\ldotp{.}\def\hbox{\mbox}\def\enspace{\hspace{0.5em}}
\def\hyphen{-}\def\textunderscore{\_}\def\textdollar{\$}\def\textpercent{\%}
\def\textbraceleft{\{}\def\textbraceright{\}}\def\qedhere{}
\def\boldmath{}\def\unboldmath{}\def\nolinebreak{}\def\allowbreak{}
"""

# Extra definitions made visible by \usepackage, keyed by package name.
PACKAGE_BINDINGS = {
    "xcolor": r"\newcommand{\textcolor}[2]{#2}\newcommand{\color}[1]{}"
              r"\newcommand{\definecolor}[3]{}\newcommand{\colorbox}[2]{#2}",
    "hyperref": r"\newcommand{\hypersetup}[1]{}\newcommand{\texorpdfstring}[2]{#1}"
                r"\newcommand{\phantomsection}{}",
    "graphicx": r"\newcommand{\graphicspath}[1]{}",
    "geometry": r"\newcommand{\geometry}[1]{}",
    "amsthm": r"\newcommand{\theoremstyle}[1]{}\newcommand{\qed}{}",
    "cleveref": r"\newcommand{\cref}[1]{\ref{#1}}\newcommand{\Cref}[1]{\ref{#1}}",
    "enumitem": r"\newcommand{\setlist}[2][]{}",
    "microtype": "", "amsmath": "", "amssymb": "", "amsfonts": "", "inputenc": "",
    "fontenc": "", "lmodern": "", "natbib": "", "url": "", "booktabs": "",
    "mathtools": "", "bm": r"\newcommand{\bm}[1]{\boldsymbol{#1}}",
    "listings": "", "orcidlink": r"\newcommand{\orcidlink}[1]{}",
}
PACKAGE_COLOR_ALIAS = {"color": "xcolor"}
PACKAGE_ENVIRONMENTS = {"listings": {"lstlisting": "verbatim"}, "comment": {"comment": "comment"}}

# Math control sequences handled by the grammar beyond the symbol table.
MATH_STRUCTURAL = (
    "frac", "dfrac", "tfrac", "cfrac", "binom", "dbinom", "tbinom", "sqrt", "left", "right",
    "middle", "big", "Big", "bigg", "Bigg", "bigl", "bigr", "Bigl", "Bigr", "biggl",
    "biggr", "Biggl", "Biggr", "bigm", "Bigm", "over", "atop", "choose", "limits",
    "nolimits", "displaystyle", "textstyle", "scriptstyle", "scriptscriptstyle",
    "text", "mbox", "mathrm", "mathbf", "mathit", "mathsf", "mathtt", "mathcal",
    "mathbb", "mathfrak", "mathscr", "boldsymbol", "operatorname", "hat", "widehat",
    "bar", "overline", "underline", "tilde", "widetilde", "vec", "dot", "ddot",
    "check", "breve", "acute", "grave", "mathring", "overbrace", "underbrace",
    "overrightarrow", "overleftarrow", "quad", "qquad", ",", ";", ":", "!", "hline",
    "stackrel", "overset", "underset", "substack", "phantom", "mathop", "mathrel",
    "mathbin", "mathord",
)


def _builtin_frame() -> Dict[str, object]:
    frame: Dict[str, object] = {}
    for name in STRUCTURAL:
        frame[name] = Unexpandable(name)
    for name in MATH_STRUCTURAL:
        frame[name] = Unexpandable(name)
    for name in assets.operator_table():
        if name.startswith("\\"):
            frame.setdefault(name[1:], Unexpandable(name[1:]))
    for name in ACTIVE:
        frame[name] = Unexpandable(name)
    for name, handler in PRIMITIVES.items():
        frame[name] = Primitive(name, handler)
    for name, handler in CONDITIONALS.items():
        frame[name] = Primitive(name, handler, conditional=True)
    for name in UNSUPPORTED_CONDITIONALS:
        frame[name] = Primitive(name, "_p_unsupported_if", conditional=True)
    for name, kind in BUILTIN_ENVIRONMENTS.items():
        frame[_env_key(name)] = EnvironmentDefinition(name, kind)
    return frame


_BUILTIN_STATE: Optional[MacroState] = None


def builtin_bindings() -> MacroState:
    """Fresh state preloaded with the supported subset."""
    global _BUILTIN_STATE
    if _BUILTIN_STATE is None:
        state = MacroState(ScopeStack(_builtin_frame()))
        exp = Expander(state, origin=BUILTIN)
        exp.run_tokens(tokenize(BUILTIN_MACROS))
        _BUILTIN_STATE = state
    return _BUILTIN_STATE.copy()


def manifest_names(state: MacroState) -> List[str]:
    """Manifest-style names (``\\cs`` or ``{env}``) of the builtin layer."""
    out = []
    for key in state.names(BUILTIN):
        is_env = len(key) > 2 and key.startswith("{") and key.endswith("}")
        out.append(key if is_env else "\\" + key)
    return sorted(out)


# -- the expander ------------------------------------------------------------

_ENDENV = "\x00endenv"
_NOEXPAND = "\x00noexpand"
_CHECK_EVERY = 2048


class _Frame:
    __slots__ = ("tokens", "i", "depth", "anchor")

    def __init__(self, tokens, depth, anchor):
        self.tokens = tokens
        self.i = 0
        self.depth = depth
        self.anchor = anchor


class _Cond:
    __slots__ = ("name", "state", "span")

    def __init__(self, name, state, span):
        self.name = name
        self.state = state  # "true" (running then-branch) | "false" (running else-branch)
        self.span = span


class Expander:
    """One expansion run over a token source.

    The ``out`` list receives the expanded stream; ``missing`` and
    ``diagnostics`` accumulate as expansion proceeds.
    """

    def __init__(self, state: MacroState, *, lexer: Optional[Lexer] = None,
                 origin: str = DOCUMENT, deadline: Optional[float] = None):
        self.state = state
        self.lexer = lexer
        self.origin = origin
        self.deadline = deadline
        self.stack: List[_Frame] = []
        self.out: List[Token] = []
        self.diagnostics: List[Diagnostic] = []
        self.missing: Dict[str, MissingMacroRecord] = {}
        self.groups: List[Tuple[str, str, Span]] = []
        self.conds: List[_Cond] = []
        self.math: List[str] = []
        self.para_open = False
        self.in_preamble = False
        self.seen_document = False
        self._src_end = 0
        self._steps = 0
        self._prefix_global = False
        self._prefix_long = False

    # -- token supply --

    def _raw(self):
        stack = self.stack
        while stack:
            f = stack[-1]
            if f.i < len(f.tokens):
                tok = f.tokens[f.i]
                f.i += 1
                return tok, f.depth, f.anchor
            stack.pop()
        if self.lexer is None:
            return None
        tok = self.lexer.next_token()
        if tok is None:
            return None
        self._src_end = tok.end
        return tok, 0, None

    def _peek_raw(self):
        for f in reversed(self.stack):
            if f.i < len(f.tokens):
                return f.tokens[f.i]
        if self.lexer is None:
            return None
        return self.lexer.peek()

    def _push(self, tokens, depth, anchor):
        if tokens:
            if depth > self.state.depth_limit:
                raise ExpansionDepthExceeded(
                    f"macro expansion nested deeper than {self.state.depth_limit}", anchor)
            self.stack.append(_Frame(tokens, depth, anchor))

    def _unread(self, tok, depth, anchor):
        self.stack.append(_Frame((tok,), depth, anchor))

    def _source_level(self) -> bool:
        return self.lexer is not None and not any(f.i < len(f.tokens) for f in self.stack)

    # -- output --

    def _emit(self, tok: Token, anchor) -> None:
        if anchor is not None and (tok.start, tok.end) != anchor:
            tok = tok._replace(start=anchor[0], end=anchor[1])
        self.out.append(tok)
        if tok.kind == CHAR:
            if tok.cat != Catcode.SPACE:
                self.para_open = True
        elif tok.kind == CS and tok.text == "par":
            self.para_open = False

    def _diag(self, d: Diagnostic) -> None:
        self.diagnostics.append(d)

    # -- argument readers (no expansion) --

    def _skip_spaces(self):
        while True:
            t = self._peek_raw()
            if t is not None and t.kind == CHAR and t.cat == Catcode.SPACE:
                self._raw()
                continue
            return

    def _skip_spaces_and_pars(self):
        while True:
            t = self._peek_raw()
            if t is not None and ((t.kind == CHAR and t.cat == Catcode.SPACE) or t.is_cs("par")):
                self._raw()
                continue
            return

    def _read_balanced(self, open_tok) -> List[Token]:
        """Tokens up to the ``}`` matching an already-consumed ``{``."""
        level = 1
        out = []
        while True:
            r = self._raw()
            if r is None:
                self._diag(error("unbalanced-group", "end of input inside a braced argument",
                                 open_tok.span))
                return out
            t = r[0]
            if t.kind == CHAR:
                if t.cat == Catcode.BEGIN_GROUP:
                    level += 1
                elif t.cat == Catcode.END_GROUP:
                    level -= 1
                    if level == 0:
                        return out
            out.append(t)

    def _read_arg(self, long: bool = True, name: str = "") -> Optional[List[Token]]:
        self._skip_spaces()
        r = self._raw()
        if r is None:
            return None
        t = r[0]
        if t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP:
            toks = self._read_balanced(t)
            if not long and any(x.is_cs("par") for x in toks):
                self._diag(error("runaway-argument",
                                 f"paragraph ended before \\{name} was complete", t.span))
            return toks
        if t.kind == CHAR and t.cat == Catcode.END_GROUP:
            self._unread(t, r[1], r[2])
            self._diag(error("missing-argument", f"argument of \\{name} missing", t.span))
            return []
        return [t]

    def _read_optional(self) -> Optional[List[Token]]:
        self._skip_spaces()
        t = self._peek_raw()
        if t is None or not t.is_char(text="["):
            return None
        self._raw()
        level = 0
        out = []
        while True:
            r = self._raw()
            if r is None:
                self._diag(error("unterminated-optional", "end of input inside [...]", t.span))
                return out
            x = r[0]
            if x.kind == CHAR:
                if x.cat == Catcode.BEGIN_GROUP:
                    level += 1
                elif x.cat == Catcode.END_GROUP:
                    level -= 1
                elif x.text == "]" and x.cat == Catcode.OTHER and level == 0:
                    return out
            out.append(x)

    def _read_star(self) -> bool:
        self._skip_spaces()
        t = self._peek_raw()
        if t is not None and t.is_char(text="*"):
            self._raw()
            return True
        return False

    def _read_text_arg(self, name) -> Optional[str]:
        toks = self._read_arg(name=name)
        if toks is None:
            return None
        return "".join(t.text for t in toks if t.kind == CHAR).strip()

    def _read_cs_target(self, name):
        """The control sequence being defined: ``\\foo`` or ``{\\foo}``."""
        self._skip_spaces()
        r = self._raw()
        if r is None:
            return None
        t = r[0]
        if t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP:
            inner = [x for x in self._read_balanced(t) if not (x.kind == CHAR and x.cat == Catcode.SPACE)]
            if len(inner) == 1 and (inner[0].kind == CS or inner[0].cat == Catcode.ACTIVE):
                return inner[0]
            self._diag(error("bad-definition", f"\\{name} expects a control sequence", t.span))
            return None
        if t.kind == CS or (t.kind == CHAR and t.cat == Catcode.ACTIVE):
            return t
        self._diag(error("bad-definition", f"\\{name} expects a control sequence", t.span))
        return None

    # -- main loop --

    def run_tokens(self, tokens: Iterable[Token]) -> List[Token]:
        self._push(tuple(tokens), 0, None)
        if self.stack:  # tokens handed in directly keep their own spans
            self.stack[-1].anchor = None
        self.run()
        return self.out

    def run(self) -> List[Token]:
        while True:
            r = self._raw()
            if r is None:
                break
            self._steps += 1
            if self.deadline is not None and self._steps % _CHECK_EVERY == 0:
                if time.perf_counter() > self.deadline:
                    raise ConversionTimeout("per-document time limit exceeded")
            self._step(*r)
        self._finish()
        return self.out

    def _finish(self):
        for kind, name, span in reversed(self.groups):
            if kind == "brace":
                self._diag(error("unbalanced-group", "group opened here is never closed", span))
            elif kind == "env":
                if name != "document":
                    self._diag(error("unterminated-environment",
                                     f"\\begin{{{name}}} is never ended", span))
            else:
                self._diag(error("unbalanced-group", "\\begingroup is never ended", span))
        for c in self.conds:
            self._diag(error("unterminated-conditional", f"\\{c.name} is never closed by \\fi", c.span))

    def _step(self, tok: Token, depth: int, anchor) -> None:
        kind = tok.kind
        if kind == CHAR:
            cat = tok.cat
            if cat == Catcode.ACTIVE:
                self._expand_cs(tok, depth, anchor)
            elif cat == Catcode.BEGIN_GROUP:
                self.state.scopes.push()
                self.groups.append(("brace", "", tok.span))
                self._emit(tok, anchor)
            elif cat == Catcode.END_GROUP:
                self._close_brace(tok, anchor)
            elif cat == Catcode.MATH_SHIFT:
                self._math_shift(tok, depth, anchor)
            elif cat == Catcode.PARAMETER and self.origin == DOCUMENT:
                self._diag(error("misplaced-parameter", "parameter character outside a definition",
                                 anchor or tok.span))
                self._emit(tok, anchor)
            else:
                self._emit(tok, anchor)
            return
        if kind == CS:
            if tok.text == _ENDENV:
                self._end_user_env(tok)
                return
            if tok.text == _NOEXPAND:
                self._emit(tok.data, anchor)
                return
            self._expand_cs(tok, depth, anchor)
            return
        self._emit(tok, anchor)

    def _close_brace(self, tok, anchor):
        if not self.groups:
            self._diag(error("unbalanced-group", "too many }'s", anchor or tok.span))
            return
        kind, name, span = self.groups[-1]
        if kind != "brace":
            self._diag(error("unbalanced-group",
                             f"}} closes a group opened by \\begin{{{name}}}" if kind == "env"
                             else "} closes a \\begingroup", anchor or tok.span))
            return
        self.groups.pop()
        self._pop_scope()
        self._emit(tok, anchor)

    def _pop_scope(self):
        restored = self.state.scopes.pop()
        if restored:
            table = self.state.catcodes.copy()
            for code in restored:
                table[code] = self._effective_catcode(code)
            self._install_table(table)

    def _effective_catcode(self, code):
        for frame in reversed(self.state.scopes.catcode_frames):
            if code in frame:
                return frame[code]
        return int(default_catcodes()[code])

    def _install_table(self, table):
        self.state.catcodes = table
        if self.lexer is not None:
            self.lexer.set_table(table)

    def _math_shift(self, tok, depth, anchor):
        nxt = self._peek_raw()
        double = nxt is not None and nxt.kind == CHAR and nxt.cat == Catcode.MATH_SHIFT and nxt.start == tok.end
        if self.math and self.math[-1] in ("$", "$$"):
            top = self.math.pop()
            self._emit(tok, anchor)
            if top == "$$" and double:
                r = self._raw()
                self._emit(r[0], r[2])
            return
        if double and not (self.math and self.math[-1] == "text"):
            r = self._raw()
            self.math.append("$$")
            self._emit(tok, anchor)
            self._emit(r[0], r[2])
            return
        self.math.append("$")
        self._emit(tok, anchor)

    def _expand_cs(self, tok: Token, depth: int, anchor) -> None:
        name = tok.text
        b = self.state.lookup(name)
        if b is None:
            self._undefined(tok, anchor)
            return
        if isinstance(b, MacroDefinition):
            self._expand_macro(tok, b, depth, anchor)
        elif isinstance(b, Unexpandable):
            if b.name != name:  # \let alias: downstream stages dispatch on the real name
                name = b.name
                tok = tok._replace(text=name)
            if name in ("(", "["):
                self.math.append(name)
            elif name in (")", "]") and self.math and self.math[-1] in ("(", "["):
                self.math.pop()
            self._emit(tok, anchor)
            if name in ("section", "subsection", "subsubsection", "paragraph", "subparagraph", "item"):
                self.para_open = False
        elif isinstance(b, Primitive):
            getattr(self, b.handler)(tok, depth, anchor)
        elif isinstance(b, CharAlias):
            self._step(b.token, depth, anchor or (tok.start, tok.end))
        else:  # pragma: no cover - bindings are closed over the types above
            self._emit(tok, anchor)

    def _undefined(self, tok, anchor):
        span = anchor or tok.span
        name = tok.text
        rec = self.missing.get(name)
        if rec is None:
            self.missing[name] = MissingMacroRecord(name, 1, span)
            self._diag(error("undefined-macro", f"undefined control sequence \\{name}", span))
        else:
            rec.count += 1
        self.out.append(Token(MARKER, name, 0, span[0], span[1], MarkerInfo("undefined")))
        self.para_open = True

    # -- macro invocation --

    def _expand_macro(self, tok, m: MacroDefinition, depth, anchor):
        top_level = anchor is None and depth == 0
        args = self._match_args(tok, m)
        if args is None:
            return
        if m.pattern or m.optional_default is not None:
            body = _substitute(m.body, args)
        else:
            body = m.body
        if top_level:
            new_anchor = (tok.start, max(tok.end, self._src_end))
        else:
            new_anchor = anchor
        self._push(body, depth + 1, new_anchor)

    def _match_args(self, tok, m: MacroDefinition):
        args: Dict[int, List[Token]] = {}
        pat = m.pattern
        k = 0
        if m.optional_default is not None:
            opt = self._read_optional()
            args[1] = list(m.optional_default) if opt is None else opt
            k = 1 if pat and pat[0] == 1 else 0
        while k < len(pat):
            p = pat[k]
            if not isinstance(p, int):
                r = self._raw()
                if r is None or r[0].meaning != p.meaning:
                    self._diag(error("pattern-mismatch",
                                     f"use of \\{m.name} does not match its definition", tok.span))
                    if r is not None:
                        self._unread(*r)
                    return None
                k += 1
                continue
            delims = []
            j = k + 1
            while j < len(pat) and not isinstance(pat[j], int):
                delims.append(pat[j])
                j += 1
            if not delims:
                a = self._read_arg(m.long, m.name)
                if a is None:
                    self._diag(error("missing-argument", f"end of input in arguments of \\{m.name}",
                                     tok.span))
                    a = []
                args[p] = a
                k += 1
            else:
                a = self._read_delimited(tuple(d.meaning for d in delims), m, tok)
                if a is None:
                    return None
                args[p] = a
                k = j
        return args

    def _read_delimited(self, delims, m, tok):
        out: List[Token] = []
        level = 0
        n = len(delims)
        while True:
            if level == 0 and len(out) >= n and tuple(x.meaning for x in out[-n:]) == delims:
                got = out[:-n]
                if (len(got) >= 2 and got[0].is_char(Catcode.BEGIN_GROUP)
                        and got[-1].is_char(Catcode.END_GROUP) and _single_group(got)):
                    got = got[1:-1]
                return got
            r = self._raw()
            if r is None:
                self._diag(error("runaway-argument",
                                 f"end of input while scanning use of \\{m.name}", tok.span))
                return None
            t = r[0]
            if t.kind == CHAR:
                if t.cat == Catcode.BEGIN_GROUP:
                    level += 1
                elif t.cat == Catcode.END_GROUP:
                    level -= 1
                    if level < 0:
                        self._diag(error("runaway-argument",
                                         f"argument of \\{m.name} has an extra }}", t.span))
                        self._unread(*r)
                        return None
            if t.is_cs("par") and not m.long:
                self._diag(error("runaway-argument",
                                 f"paragraph ended before \\{m.name} was complete", t.span))
                self._unread(*r)
                return None
            out.append(t)

    # -- definition primitives --

    def _p_prefix(self, tok, depth, anchor):
        if tok.text == "global":
            self._prefix_global = True
        elif tok.text == "long":
            self._prefix_long = True
        nxt = self._peek_raw()
        if nxt is None or not nxt.kind == CS:
            self._prefix_global = self._prefix_long = False

    def _take_prefixes(self):
        g, l = self._prefix_global, self._prefix_long
        self._prefix_global = self._prefix_long = False
        return g, l

    def _p_def(self, tok, depth, anchor):
        g, long = self._take_prefixes()
        if tok.text in ("gdef", "xdef"):
            g = True
        target = self._read_cs_target(tok.text)
        if target is None:
            return
        params = []
        while True:
            r = self._raw()
            if r is None:
                self._diag(error("bad-definition", f"end of input in \\{tok.text}", tok.span))
                return
            t = r[0]
            if t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP:
                body = self._read_balanced(t)
                break
            params.append(t)
        if tok.text in ("edef", "xdef"):
            body = self._expand_fully(body)
        try:
            pattern = parse_parameter_text(params)
            arity = sum(1 for p in pattern if isinstance(p, int))
            parsed = parse_body(body, arity)
        except MalformedPattern as exc:
            self._diag(error(exc.code, str(exc), exc.span or tok.span))
            return
        self.state.scopes.bind(target.text, MacroDefinition(
            target.text, pattern, parsed, long, self.origin), g)

    def _expand_fully(self, body):
        sub = Expander(self.state, origin=self.origin, deadline=self.deadline)
        sub.math = list(self.math)
        sub._push(tuple(body), 0, None)
        sub.stack[-1].anchor = None
        while True:
            r = sub._raw()
            if r is None:
                break
            t = r[0]
            if t.kind == CHAR and t.cat in (Catcode.BEGIN_GROUP, Catcode.END_GROUP):
                sub.out.append(t)
                continue
            sub._step(*r)
        self.diagnostics.extend(sub.diagnostics)
        for name, rec in sub.missing.items():
            self._merge_missing(rec)
        return [t for t in sub.out]

    def _merge_missing(self, rec):
        mine = self.missing.get(rec.name)
        if mine is None:
            self.missing[rec.name] = MissingMacroRecord(rec.name, rec.count, rec.first_span)
        else:
            mine.count += rec.count

    def _p_let(self, tok, depth, anchor):
        g, _ = self._take_prefixes()
        target = self._read_cs_target("let")
        if target is None:
            return
        self._skip_spaces()
        nxt = self._peek_raw()
        if nxt is not None and nxt.is_char(text="=", cat=Catcode.OTHER):
            self._raw()
            r = self._raw()
            if r is not None and r[0].kind == CHAR and r[0].cat == Catcode.SPACE:
                r = self._raw()
        else:
            r = self._raw()
        if r is None:
            self._diag(error("bad-definition", "end of input in \\let", tok.span))
            return
        src = r[0]
        if src.kind == CS or (src.kind == CHAR and src.cat == Catcode.ACTIVE):
            value = self.state.lookup(src.text)
        else:
            value = CharAlias(src, self.origin)
        self.state.scopes.bind(target.text, value, g)

    def _p_newcommand(self, tok, depth, anchor):
        self._read_star()
        target = self._read_cs_target(tok.text)
        if target is None:
            return
        nargs_toks = self._read_optional()
        default = self._read_optional()
        body = self._read_arg(name=tok.text)
        if body is None:
            self._diag(error("bad-definition", f"end of input in \\{tok.text}", tok.span))
            return
        nargs = 0
        if nargs_toks is not None:
            txt = "".join(t.text for t in nargs_toks if t.kind == CHAR).strip()
            if not txt.isdigit() or not 0 <= int(txt) <= 9:
                self._diag(error("bad-definition", f"illegal argument count [{txt}]", tok.span))
                return
            nargs = int(txt)
        existing = self.state.lookup(target.text)
        if tok.text == "providecommand" and existing is not None:
            return
        if tok.text == "newcommand" and existing is not None:
            self._diag(warning("redefinition", f"\\newcommand redefines \\{target.text}", anchor or tok.span))
        elif tok.text == "renewcommand" and existing is None:
            self._diag(warning("renew-undefined", f"\\renewcommand of undefined \\{target.text}",
                               anchor or tok.span))
        pattern = tuple(range(1, nargs + 1))
        try:
            parsed = parse_body(body, nargs)
        except MalformedPattern as exc:
            self._diag(error(exc.code, str(exc), exc.span or tok.span))
            return
        if default is not None and nargs == 0:
            self._diag(error("bad-definition", "optional default given for a macro without arguments",
                             tok.span))
            default = None
        self.state.scopes.bind(target.text, MacroDefinition(
            target.text, pattern, parsed, True, self.origin,
            tuple(default) if default is not None else None))

    def _p_declaremathoperator(self, tok, depth, anchor):
        self._read_star()
        target = self._read_cs_target(tok.text)
        if target is None:
            return
        body = self._read_arg(name=tok.text) or []
        op = Token(CS, "operatorname", 0, tok.start, tok.end)
        lb = Token(CHAR, "{", Catcode.BEGIN_GROUP, tok.start, tok.end)
        rb = Token(CHAR, "}", Catcode.END_GROUP, tok.start, tok.end)
        self.state.scopes.bind(target.text, MacroDefinition(
            target.text, (), (op, lb, *body, rb), False, self.origin))

    def _p_newenvironment(self, tok, depth, anchor):
        self._read_star()
        name = self._read_text_arg(tok.text)
        if not name:
            self._diag(error("bad-definition", f"\\{tok.text} needs an environment name", tok.span))
            return
        nargs_toks = self._read_optional()
        default = self._read_optional()
        begin = self._read_arg(name=tok.text)
        end = self._read_arg(name=tok.text)
        if begin is None or end is None:
            self._diag(error("bad-definition", f"end of input in \\{tok.text}", tok.span))
            return
        nargs = 0
        if nargs_toks is not None:
            txt = "".join(t.text for t in nargs_toks if t.kind == CHAR).strip()
            nargs = int(txt) if txt.isdigit() else 0
        existing = self.state.lookup_env(name)
        if tok.text == "newenvironment" and existing is not None:
            self._diag(warning("redefinition", f"\\newenvironment redefines {{{name}}}", anchor or tok.span))
        try:
            b = parse_body(begin, nargs)
            e = parse_body(end, 0)
        except MalformedPattern as exc:
            self._diag(error(exc.code, str(exc), exc.span or tok.span))
            return
        self.state.scopes.bind(_env_key(name), EnvironmentDefinition(
            name, "user", self.origin, tuple(range(1, nargs + 1)), b, e,
            tuple(default) if default is not None else None))

    def _p_newtheorem(self, tok, depth, anchor):
        star = self._read_star()
        name = self._read_text_arg("newtheorem")
        shared = self._read_optional()
        label_toks = self._read_arg(name="newtheorem")
        self._read_optional()
        if not name or label_toks is None:
            self._diag(error("bad-definition", "malformed \\newtheorem", tok.span))
            return
        label = detokenize(label_toks).strip()
        counter = None
        if not star:
            counter = "".join(t.text for t in shared if t.kind == CHAR).strip() if shared else name
        self.state.scopes.bind(_env_key(name), EnvironmentDefinition(
            name, "theorem", self.origin, label=label, counter=counter), True)

    def _p_relax(self, tok, depth, anchor):
        pass

    def _p_begingroup(self, tok, depth, anchor):
        self.state.scopes.push()
        self.groups.append(("semi", "", anchor or tok.span))

    def _p_endgroup(self, tok, depth, anchor):
        if not self.groups or self.groups[-1][0] != "semi":
            self._diag(error("unbalanced-group", "\\endgroup without matching \\begingroup",
                             anchor or tok.span))
            return
        self.groups.pop()
        self._pop_scope()

    def _p_csname(self, tok, depth, anchor):
        chars = []
        while True:
            r = self._raw()
            if r is None:
                self._diag(error("missing-endcsname", "end of input inside \\csname", tok.span))
                return
            t = r[0]
            if t.is_cs("endcsname"):
                break
            if t.kind == CS:
                b = self.state.lookup(t.text)
                if isinstance(b, MacroDefinition):
                    self._expand_macro(t, b, r[1], r[2])
                    continue
                self._diag(error("bad-csname", f"\\{t.text} inside \\csname", t.span))
                continue
            chars.append(t.text)
        name = "".join(chars)
        if self.state.lookup(name) is None:
            self.state.scopes.bind(name, Primitive(name, "_p_relax"))
        self._unread(Token(CS, name, 0, tok.start, tok.end), depth, anchor)

    def _p_expandafter(self, tok, depth, anchor):
        first = self._raw()
        second = self._raw()
        if first is None or second is None:
            return
        t2 = second[0]
        if t2.kind == CS or (t2.kind == CHAR and t2.cat == Catcode.ACTIVE):
            b = self.state.lookup(t2.text)
            if isinstance(b, MacroDefinition):
                self._expand_macro(t2, b, second[1], second[2])
                self._unread(*first)
                return
        self._unread(*second)
        self._unread(*first)

    def _p_noexpand(self, tok, depth, anchor):
        r = self._raw()
        if r is None:
            return
        self._unread(Token(CS, _NOEXPAND, 0, r[0].start, r[0].end, r[0]), r[1], r[2])

    # -- catcodes --

    def _at_boundary(self) -> bool:
        return self.in_preamble or not self.para_open

    def _set_catcode(self, tok, code, cat, anchor):
        if not self._at_boundary():
            self._diag(error("catcode-mid-paragraph",
                             "category code change inside a paragraph is not supported",
                             anchor or tok.span))
            return
        self.state.scopes.catcode_frames[-1][code] = cat
        table = self.state.catcodes.copy()
        table[code] = cat
        self._install_table(table)

    def _read_number(self) -> Optional[int]:
        self._skip_spaces()
        r = self._raw()
        if r is None:
            return None
        t = r[0]
        if t.is_char(text="`"):
            r2 = self._raw()
            if r2 is None:
                return None
            t2 = r2[0]
            if t2.kind == CS and len(t2.text) == 1:
                return ord(t2.text)
            if t2.kind == CHAR:
                return ord(t2.text)
            return None
        digits = ""
        while t is not None and t.kind == CHAR and t.text.isdigit():
            digits += t.text
            nxt = self._peek_raw()
            if nxt is not None and nxt.kind == CHAR and nxt.text.isdigit():
                t = self._raw()[0]
            else:
                t = None
        if not digits:
            self._unread(*r)
            return None
        return int(digits)

    def _p_catcode(self, tok, depth, anchor):
        code = self._read_number()
        self._skip_spaces()
        nxt = self._peek_raw()
        if nxt is not None and nxt.is_char(text="="):
            self._raw()
        cat = self._read_number()
        nxt = self._peek_raw()
        if nxt is not None and nxt.kind == CHAR and nxt.cat == Catcode.SPACE:
            self._raw()
        if code is None or cat is None or not 0 <= cat <= 15 or not 0 <= code < 0x110000:
            self._diag(error("bad-catcode", "malformed \\catcode assignment", anchor or tok.span))
            return
        self._set_catcode(tok, code, cat, anchor)

    def _p_makeat(self, tok, depth, anchor):
        cat = Catcode.LETTER if tok.text == "makeatletter" else Catcode.OTHER
        self._set_catcode(tok, ord("@"), int(cat), anchor)

    # -- document-level primitives --

    def _p_documentclass(self, tok, depth, anchor):
        self._read_optional()
        cls = self._read_text_arg("documentclass")
        self.in_preamble = True
        self._diag(info("documentclass", f"document class {cls}", anchor or tok.span))

    def _p_usepackage(self, tok, depth, anchor):
        self._read_optional()
        names = self._read_text_arg(tok.text) or ""
        self._read_optional()
        for raw in names.split(","):
            pkg = raw.strip()
            if not pkg:
                continue
            pkg = PACKAGE_COLOR_ALIAS.get(pkg, pkg)
            self.state.packages.append(pkg)
            if pkg in PACKAGE_BINDINGS:
                self._load_package(pkg)
            else:
                self._diag(info("package-unbound", f"package {pkg} has no binding", anchor or tok.span))

    def _load_package(self, pkg):
        src = PACKAGE_BINDINGS[pkg]
        if src:
            sub = Expander(self.state, origin=PACKAGE)
            sub.run_tokens(tokenize(src))
        for env, kind in PACKAGE_ENVIRONMENTS.get(pkg, {}).items():
            self.state.scopes.bind(_env_key(env), EnvironmentDefinition(env, kind, PACKAGE), True)

    def _p_ensuremath(self, tok, depth, anchor):
        arg = self._read_arg(name="ensuremath") or []
        if self.math and self.math[-1] != "text":
            self._push(tuple(arg), depth + 1, anchor or (tok.start, max(tok.end, self._src_end)))
            return
        span = anchor or (tok.start, max(tok.end, self._src_end))
        shift = Token(CHAR, "$", Catcode.MATH_SHIFT, span[0], span[1])
        self._push((shift, *arg, shift), depth + 1, span)

    def _p_input(self, tok, depth, anchor):
        name = self._read_text_arg(tok.text)
        self._diag(warning("input-not-followed", f"\\{tok.text}{{{name}}} is not followed",
                           anchor or tok.span))

    # -- source-level readers (verb, url, verbatim) --

    def _p_verb(self, tok, depth, anchor):
        if not self._source_level():
            self._diag(error("verb-in-argument", "\\verb cannot appear inside a macro argument",
                             anchor or tok.span))
            return
        text = self.lexer.text
        p = tok.end
        if p < len(text) and text[p] == "*":
            p += 1
        if p >= len(text):
            self._diag(error("bad-verb", "\\verb at end of input", tok.span))
            return
        delim = text[p]
        q = text.find(delim, p + 1)
        nl = text.find("\n", p + 1)
        if q < 0 or (0 <= nl < q):
            self._diag(error("bad-verb", "\\verb ended by end of line", tok.span))
            q = nl if nl >= 0 else len(text)
            content = text[p + 1:q]
            self.lexer.jump(q)
        else:
            content = text[p + 1:q]
            self.lexer.jump(q + 1)
        self._emit(tok, anchor)
        self.out.append(Token(MARKER, "verb", 0, tok.start, min(q + 1, len(text)),
                              MarkerInfo("verbatim", content, (p + 1, q))))
        self.para_open = True

    def _p_url(self, tok, depth, anchor):
        if not self._source_level():
            arg = self._read_arg(name=tok.text) or []
            content = detokenize(arg)
            self._emit(tok, anchor)
            span = anchor or tok.span
            self.out.append(Token(MARKER, "url", 0, span[0], span[1], MarkerInfo("verbatim", content)))
            return
        text = self.lexer.text
        p = tok.end
        while p < len(text) and text[p] in " \t":
            p += 1
        if p >= len(text) or text[p] != "{":
            arg = self._read_arg(name=tok.text) or []
            self._emit(tok, anchor)
            self.out.append(Token(MARKER, "url", 0, tok.start, tok.end,
                                  MarkerInfo("verbatim", detokenize(arg))))
            return
        level = 0
        q = p
        while q < len(text):
            ch = text[q]
            if ch == "\\":
                q += 2
                continue
            if ch == "{":
                level += 1
            elif ch == "}":
                level -= 1
                if level == 0:
                    break
            q += 1
        content = text[p + 1:q]
        self.lexer.jump(min(q + 1, len(text)))
        self._emit(tok, anchor)
        self.out.append(Token(MARKER, "url", 0, p, min(q + 1, len(text)),
                              MarkerInfo("verbatim", content, (p + 1, q))))
        self.para_open = True

    # -- environments --

    def _read_env_name(self):
        self._skip_spaces()
        r = self._raw()
        if r is None:
            return None, []
        t = r[0]
        if not t.is_char(Catcode.BEGIN_GROUP):
            self._unread(*r)
            return None, []
        toks = self._read_balanced(t)
        name = "".join(x.text for x in toks if x.kind == CHAR).strip()
        close = Token(CHAR, "}", Catcode.END_GROUP,
                      (toks[-1].end if toks else t.end), (toks[-1].end if toks else t.end) + 1)
        return name, [t, *toks, close]

    def _p_begin(self, tok, depth, anchor):
        name, name_toks = self._read_env_name()
        if not name:
            self._diag(error("bad-environment", "\\begin without an environment name", anchor or tok.span))
            return
        env = self.state.lookup_env(name)
        if name == "document":
            self.in_preamble = False
            self.seen_document = True
        if env is None:
            self._raw_environment(tok, name, name_toks, "environment", anchor)
            return
        kind = env.kind
        if kind == "user":
            self.state.scopes.push()
            self.groups.append(("env", name, anchor or tok.span))
            m = MacroDefinition(name, env.pattern, env.begin, True, env.origin, env.optional_default)
            args = self._match_args(tok, m)
            body = _substitute(env.begin, args or {})
            end_tok = Token(CS, _ENDENV, 0, tok.start, tok.end, name)
            span = anchor or (tok.start, max(tok.end, self._src_end))
            self._push(body, depth + 1, span)
            return
        if kind == "verbatim":
            self._verbatim_environment(tok, name, name_toks, anchor)
            return
        if kind in ("table", "comment"):
            self._raw_environment(tok, name, name_toks, kind, anchor)
            return
        self.state.scopes.push()
        self.groups.append(("env", name, anchor or tok.span))
        if kind == "math":
            self.math.append("env:" + name)
        self._emit(tok, anchor)
        for t in name_toks:
            self._emit(t, anchor)
        if name == "tabular*":  # the width is a dimension, not text
            self._pass_raw_group(anchor)
        self.para_open = False

    def _pass_raw_group(self, anchor):
        """Emit the next braced group without expanding it."""
        self._skip_spaces()
        r = self._raw()
        if r is None:
            return
        if not r[0].is_char(Catcode.BEGIN_GROUP):
            self._unread(*r)
            return
        open_tok = r[0]
        toks = self._read_balanced(open_tok)
        end = toks[-1].end if toks else open_tok.end
        for t in (open_tok, *toks, Token(CHAR, "}", Catcode.END_GROUP, end, end + 1)):
            self._emit(t, anchor)

    def _p_end(self, tok, depth, anchor):
        name, name_toks = self._read_env_name()
        if not name:
            self._diag(error("bad-environment", "\\end without an environment name", anchor or tok.span))
            return
        env = self.state.lookup_env(name)
        if env is not None and env.kind == "user":
            close = Token(CS, _ENDENV, 0, tok.start, tok.end, name)
            span = anchor or (tok.start, max(tok.end, self._src_end))
            self._push((*env.end, close), depth + 1, span)
            return
        if not self._close_env(name, anchor or tok.span):
            return
        if self.math and self.math[-1] == "env:" + name:
            self.math.pop()
        self._emit(tok, anchor)
        for t in name_toks:
            self._emit(t, anchor)
        self.para_open = False
        if name == "document":
            self._after_document()

    def _after_document(self):
        # material after \end{document} is ignored
        while self.stack:
            self.stack.pop()
        if self.lexer is not None:
            rest = self.lexer.text[self.lexer.offset:].strip()
            self.lexer.jump(len(self.lexer.text))
            if rest:
                self._diag(info("after-end-document", "text after \\end{document} ignored"))

    def _close_env(self, name, span) -> bool:
        for i in range(len(self.groups) - 1, -1, -1):
            kind, gname, gspan = self.groups[i]
            if kind == "env" and gname == name:
                for kind2, gname2, gspan2 in self.groups[i + 1:]:
                    what = f"\\begin{{{gname2}}}" if kind2 == "env" else "group"
                    self._diag(error("unbalanced-group", f"{what} closed by \\end{{{name}}}", gspan2))
                while len(self.groups) > i:
                    self.groups.pop()
                    self._pop_scope()
                return True
        self._diag(error("unbalanced-group", f"\\end{{{name}}} without matching \\begin", span))
        return False

    def _end_user_env(self, tok):
        self._close_env(tok.data, tok.span)

    def _collect_environment(self, name):
        """Raw tokens up to the matching ``\\end{name}``."""
        body: List[Token] = []
        level = 1
        while True:
            r = self._raw()
            if r is None:
                return body, None, None
            t = r[0]
            if t.kind == CS and t.text in ("begin", "end"):
                nm, nt = self._read_env_name()
                if nm == name:
                    level += 1 if t.text == "begin" else -1
                    if level == 0:
                        return body, t, (nt[-1] if nt else t)
                body.append(t)
                body.extend(nt)
                continue
            body.append(t)

    def _raw_environment(self, tok, name, name_toks, kind, anchor):
        start_span = anchor or tok.span
        open_end = name_toks[-1].end if name_toks else tok.end
        body, end_tok, end_close = self._collect_environment(name)
        if end_tok is None:
            self._diag(error("unterminated-environment", f"\\begin{{{name}}} is never ended", start_span))
            stop = body[-1].end if body else open_end
            inner = (open_end, stop)
            outer_end = stop
        else:
            inner = (open_end, end_tok.start)
            outer_end = end_close.end
        if anchor is None and self.lexer is not None and inner[0] <= inner[1]:
            verbatim = self.lexer.text[inner[0]:inner[1]]
        else:
            verbatim = detokenize(body)
            inner = None
        span = anchor or (tok.start, outer_end)
        if kind == "comment":
            return
        if kind == "environment":
            self._diag(error("undefined-environment", f"undefined environment {{{name}}}", span))
        else:
            self._diag(warning("fallback-dialect", f"{{{name}}} rendered in the simpler HTML dialect", span))
        extra = None
        if kind == "table":
            spec = _leading_group(body)
            if spec is not None:
                extra, body = spec
        self.out.append(Token(MARKER, name, 0, span[0], span[1],
                              MarkerInfo(kind, verbatim, inner, tuple(body), extra)))
        self.para_open = False

    def _verbatim_environment(self, tok, name, name_toks, anchor):
        if anchor is not None or not self._source_level():
            self._raw_environment(tok, name, name_toks, "environment", anchor)
            return
        text = self.lexer.text
        p = name_toks[-1].end if name_toks else tok.end
        closing = "\\end{" + name + "}"
        q = text.find(closing, p)
        if q < 0:
            self._diag(error("unterminated-environment", f"\\begin{{{name}}} is never ended", tok.span))
            q = len(text)
            stop = q
        else:
            stop = q + len(closing)
        content = text[p:q]
        first_nl = content.find("\n")
        if first_nl >= 0 and not content[:first_nl].strip():
            p += first_nl + 1
            content = text[p:q]
        self.lexer.jump(stop)
        self.out.append(Token(MARKER, name, 0, tok.start, stop, MarkerInfo("verbatim", content, (p, q))))
        self.para_open = False

    # -- conditionals --

    def _skip_conditional(self, stop_at_else: bool):
        """Skip raw tokens to the matching ``\\else`` (if wanted) or ``\\fi``.

        Returns the name of the token that stopped the skip, or None at end
        of input.
        """
        level = 0
        while True:
            r = self._raw()
            if r is None:
                return None
            t = r[0]
            if t.kind != CS:
                continue
            b = self.state.lookup(t.text)
            if not (isinstance(b, Primitive) and b.conditional):
                continue
            if b.handler == "_p_fi":
                if level == 0:
                    return "fi"
                level -= 1
            elif b.handler == "_p_else":
                if level == 0 and stop_at_else:
                    return "else"
            else:
                level += 1

    def _branch(self, tok, anchor, truth: bool):
        span = anchor or tok.span
        if truth:
            self.conds.append(_Cond(tok.text, "true", span))
            return
        stop = self._skip_conditional(True)
        if stop == "else":
            self.conds.append(_Cond(tok.text, "false", span))
        elif stop is None:
            self._diag(error("unterminated-conditional", f"\\{tok.text} is never closed by \\fi", span))

    def _p_ifmmode(self, tok, depth, anchor):
        self._branch(tok, anchor, bool(self.math) and self.math[-1] != "text")

    def _p_ifx(self, tok, depth, anchor):
        a = self._raw()
        b = self._raw()
        if a is None or b is None:
            self._diag(error("unterminated-conditional", "end of input after \\ifx", tok.span))
            return
        self._branch(tok, anchor, self._same_meaning(a[0], b[0]))

    def _same_meaning(self, a: Token, b: Token) -> bool:
        def resolve(t):
            if t.kind == CS or (t.kind == CHAR and t.cat == Catcode.ACTIVE):
                return ("binding", self.state.lookup(t.text))
            return ("char", t.text, t.cat)

        ra, rb = resolve(a), resolve(b)
        if ra[0] != rb[0]:
            if ra[0] == "binding" and isinstance(ra[1], CharAlias):
                return ("char", ra[1].token.text, ra[1].token.cat) == rb
            if rb[0] == "binding" and isinstance(rb[1], CharAlias):
                return ("char", rb[1].token.text, rb[1].token.cat) == ra
            return False
        if ra[0] == "char":
            return ra == rb
        x, y = ra[1], rb[1]
        if x is None or y is None:
            return x is None and y is None
        if isinstance(x, MacroDefinition) and isinstance(y, MacroDefinition):
            return x.same_meaning(y)
        if isinstance(x, CharAlias) and isinstance(y, CharAlias):
            return x.token.meaning == y.token.meaning
        return type(x) is type(y) and x.name == y.name if hasattr(x, "name") else x == y

    def _p_else(self, tok, depth, anchor):
        if not self.conds:
            self._diag(error("extra-else", "\\else without a conditional", anchor or tok.span))
            return
        c = self.conds[-1]
        if c.state == "true":
            stop = self._skip_conditional(False)
            self.conds.pop()
            if stop is None:
                self._diag(error("unterminated-conditional", f"\\{c.name} is never closed by \\fi", c.span))
        else:
            self._diag(error("extra-else", "second \\else in a conditional", anchor or tok.span))

    def _p_fi(self, tok, depth, anchor):
        if not self.conds:
            self._diag(error("extra-fi", "\\fi without a conditional", anchor or tok.span))
            return
        self.conds.pop()

    def _p_unsupported_if(self, tok, depth, anchor):
        start = anchor or tok.span
        body: List[Token] = []
        level = 0
        end_tok = None
        while True:
            r = self._raw()
            if r is None:
                break
            t = r[0]
            if t.kind == CS:
                b = self.state.lookup(t.text)
                if isinstance(b, Primitive) and b.conditional:
                    if b.handler == "_p_fi":
                        if level == 0:
                            end_tok = t
                            break
                        level -= 1
                    elif b.handler != "_p_else":
                        level += 1
            body.append(t)
        if end_tok is None:
            self._diag(error("unterminated-conditional", f"\\{tok.text} is never closed by \\fi", start))
            stop = body[-1].end if body else tok.end
        else:
            stop = end_tok.end
        if anchor is None and self.lexer is not None:
            verbatim = self.lexer.text[tok.start:stop]
            inner = (tok.start, stop)
            span = (tok.start, stop)
        else:
            verbatim = "\\" + tok.text + detokenize(body) + "\\fi"
            inner = None
            span = start
        self._diag(error("unsupported-conditional",
                         f"\\{tok.text} is outside the supported conditional subset", span))
        self.out.append(Token(MARKER, tok.text, 0, span[0], span[1],
                              MarkerInfo("conditional", verbatim, inner, tuple(body))))
        self.para_open = True


def _single_group(toks) -> bool:
    level = 0
    for i, t in enumerate(toks):
        if t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP:
            level += 1
        elif t.kind == CHAR and t.cat == Catcode.END_GROUP:
            level -= 1
            if level == 0 and i != len(toks) - 1:
                return False
    return True


def _leading_group(body):
    i = 0
    while i < len(body) and body[i].kind == CHAR and body[i].cat == Catcode.SPACE:
        i += 1
    if i < len(body) and body[i].is_char(Catcode.BEGIN_GROUP):
        level = 0
        for j in range(i, len(body)):
            t = body[j]
            if t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP:
                level += 1
            elif t.kind == CHAR and t.cat == Catcode.END_GROUP:
                level -= 1
                if level == 0:
                    spec = "".join(x.text for x in body[i + 1:j] if x.kind == CHAR)
                    return spec, list(body[j + 1:])
    return None


def _substitute(body: Sequence[Token], args: Dict[int, List[Token]]) -> Tuple[Token, ...]:
    out: List[Token] = []
    for t in body:
        if t.kind == PARAM:
            out.extend(args.get(int(t.text), ()))
        else:
            out.append(t)
    return tuple(out)


def expand(tokens, state: Optional[MacroState] = None, *, deadline: Optional[float] = None):
    """Expand a token list (or a :class:`Lexer`) under ``state``.

    Returns ``(tokens, missing_records, diagnostics)``.  ``state`` is mutated
    in place, so definitions made by the input stay visible to later calls.
    """
    if state is None:
        state = builtin_bindings()
    if isinstance(tokens, Lexer):
        exp = Expander(state, lexer=tokens, deadline=deadline)
        exp.run()
        diags = list(tokens.diagnostics) + exp.diagnostics
    else:
        exp = Expander(state, deadline=deadline)
        exp.run_tokens(tokens)
        diags = exp.diagnostics
    diags.sort(key=lambda d: (d.span or (0, 0))[0])
    return exp.out, list(exp.missing.values()), diags


def theorem_environments(state: MacroState) -> Dict[str, EnvironmentDefinition]:
    """Theorem-like environments currently visible in ``state``."""
    out = {}
    for key in state.names():
        if key.startswith("{"):
            env = state.scopes.lookup(key)
            if isinstance(env, EnvironmentDefinition) and env.kind == "theorem":
                out[env.name] = env
    return out


def count_markers(tokens: Iterable[Token], kind: str = "undefined") -> int:
    return sum(1 for t in tokens if t.kind == MARKER and t.data is not None and t.data.kind == kind)
