"""Assemble the expanded token stream into a document tree.

The builder walks the stream once.  Block structure (sections, lists,
environments, display math) is kept on a container stack; inline styling is
kept on a stack of frames so that groups and paragraph breaks interact the
way TeX authors expect.  Labels are collected while building and references
are resolved in a second pass.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from .diagnostics import Diagnostic, Span, error, warning
from .tokenizer import CHAR, CS, MARKER, Catcode, Token, detokenize

SECTION_DEPTH = {"section": 1, "subsection": 2, "subsubsection": 3,
                 "paragraph": 4, "subparagraph": 5}
NUMBERED_DEPTH = 3

TEXT_STYLES = {
    "emph": "emph", "textbf": "bold", "textit": "italic", "texttt": "tt",
    "textsf": "sans", "textsc": "smallcaps", "textsl": "italic", "underline": "underline",
    "textrm": "roman", "textup": "roman", "textmd": "roman", "textnormal": "roman",
}
DECLARATIONS = {
    "em": "emph", "bf": "bold", "bfseries": "bold", "it": "italic", "itshape": "italic",
    "sl": "italic", "tt": "tt", "ttfamily": "tt", "sf": "sans", "sffamily": "sans",
    "sc": "smallcaps", "scshape": "smallcaps", "rm": "roman", "rmfamily": "roman",
    "upshape": "roman", "mdseries": "roman", "normalfont": "roman",
}
TEXT_SYMBOLS = {
    "%": "%", "&": "&", "#": "#", "$": "$", "_": "_", "{": "{", "}": "}",
    "textbackslash": "\\", "textasciitilde": "~", "textasciicircum": "^",
    "ldots": "…", "dots": "…", "S": "§", "P": "¶", "copyright": "©",
    "dag": "†", "ddag": "‡", "pounds": "£", "textemdash": "—",
    "textendash": "–", "textbullet": "•", "slash": "/", "ss": "ß",
    "o": "ø", "O": "Ø", "ae": "æ", "AE": "Æ", "aa": "å",
    "AA": "Å", "l": "ł", "L": "Ł", "i": "ı", "j": "ȷ",
    "oe": "œ", "OE": "Œ", "textquoteleft": "‘", "textquoteright": "’",
    "textquotedblleft": "“", "textquotedblright": "”", "textregistered": "®",
    "texttrademark": "™", "textdegree": "°", "textperiodcentered": "·",
    " ": " ", "@": "", "/": "",
}
ACCENTS = {
    "'": "\u0301", "`": "\u0300", "^": "\u0302", "\"": "\u0308", "~": "\u0303",
    "=": "\u0304", ".": "\u0307", "u": "\u0306", "v": "\u030c", "H": "\u030b",
    "c": "\u0327", "d": "\u0323", "b": "\u0331", "r": "\u030a", "t": "\u0361",
    "k": "\u0328",
}
LIGATURES = (("---", "—"), ("--", "–"), ("``", "“"), ("''", "”"))

# Commands dropped together with the given number of mandatory arguments
# (a leading star and optional argument are always skipped).
IGNORED = {
    "vspace": 1, "hspace": 1, "bibliographystyle": 1, "bibliography": 1,
    "titlerunning": 1, "authorrunning": 1, "noindent": 0, "indent": 0, "centering": 0,
    "raggedright": 0, "raggedleft": 0, "smallskip": 0, "medskip": 0, "bigskip": 0,
    "vfill": 0, "hfill": 0, "clearpage": 0, "newpage": 0, "pagebreak": 0,
    "nopagebreak": 0, "protect": 0, "null": 0, "tableofcontents": 0, "maketitle": 0,
    "linebreak": 0, "nolinebreak": 0, "tiny": 0, "scriptsize": 0, "footnotesize": 0,
    "small": 0, "normalsize": 0, "large": 0, "Large": 0, "LARGE": 0, "huge": 0,
    "Huge": 0, "hline": 0, "cline": 1, "toprule": 0, "midrule": 0, "bottomrule": 0,
    "footnotemark": 0, "relax": 0,
}
REF_COMMANDS = {"ref": "plain", "eqref": "paren", "autoref": "plain", "pageref": "plain",
                "cref": "plain", "Cref": "plain"}
CITE_COMMANDS = ("cite", "citep", "citet")

LIST_ENVS = {"itemize": "itemize", "enumerate": "enumerate", "description": "description"}
BLOCK_ENVS = {"abstract": "abstract", "quote": "quote", "quotation": "quote",
              "center": "center", "flushleft": "flushleft", "flushright": "flushright",
              "proof": "proof"}
DISPLAY_ENVS = {"equation", "equation*", "displaymath", "multline", "multline*", "math"}
GROUP_ENVS = {"align", "align*", "gather", "gather*", "eqnarray", "eqnarray*"}
TABLE_ENVS = {"tabular", "tabular*"}


@dataclass
class DocNode:
    kind: str
    attrs: Dict[str, object] = field(default_factory=dict)
    children: List["DocNode"] = field(default_factory=list)
    span: Optional[Span] = None
    text: str = ""
    tokens: Tuple[Token, ...] = ()
    verbatim: Optional[str] = None
    verbatim_span: Optional[Span] = None

    def text_content(self) -> str:
        if self.kind == "text-run":
            return self.text
        if self.kind == "math":
            return self.verbatim or ""
        if self.kind in ("fallback-blob", "code"):
            return self.verbatim or ""
        return "".join(c.text_content() for c in self.children)


@dataclass
class Author:
    name: str
    affiliation_refs: List[str] = field(default_factory=list)
    email: Optional[str] = None
    node: Optional[DocNode] = None


@dataclass
class Frontmatter:
    title: Optional[DocNode] = None
    authors: List[Author] = field(default_factory=list)
    affiliations: Dict[str, DocNode] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)
    diagnostics: List[Diagnostic] = field(default_factory=list)

    @property
    def title_text(self) -> Optional[str]:
        return None if self.title is None else _norm_ws(self.title.text_content())


def _norm_ws(s: str) -> str:
    return " ".join(s.split())


class _Frame:
    """An inline container in force until its group closes."""

    __slots__ = ("kind", "attrs", "level", "redirect", "node")

    def __init__(self, kind, attrs, level, redirect=False, node=None):
        self.kind = kind
        self.attrs = attrs
        self.level = level
        self.redirect = redirect
        self.node = node


def _is_space(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.SPACE


def _is_begin_group(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.BEGIN_GROUP


def _is_end_group(t: Token) -> bool:
    return t.kind == CHAR and t.cat == Catcode.END_GROUP


def _alpha(n: int) -> str:
    s = ""
    while n > 0:
        n, r = divmod(n - 1, 26)
        s = chr(ord("A") + r) + s
    return s


class _Builder:
    def __init__(self, tokens: Sequence[Token], source: Optional[str], theorems, state=None):
        self.toks = list(tokens)
        self.i = 0
        self.source = source
        self.theorems = theorems
        self.diagnostics: List[Diagnostic] = []
        shared = state or {}
        self.counters: Dict[str, int] = shared.setdefault("counters", {})
        self.labels: Dict[str, Tuple[str, str]] = shared.setdefault("labels", {})
        self.refs: List[DocNode] = shared.setdefault("refs", [])
        self.math_index: List[int] = shared.setdefault("math_index", [0])
        self.shared = shared
        self.root = DocNode("document")
        self.front = DocNode("frontmatter")
        self.root.children.append(self.front)
        self.containers: List[DocNode] = [self.root]
        self.para: Optional[DocNode] = None
        self.frames: List[_Frame] = []
        self.level = 0
        self.last_target: Optional[DocNode] = None
        self.appendix = False
        self.author_node: Optional[DocNode] = None
        self.in_preamble = False

    # -- token access --

    def peek(self, k: int = 0) -> Optional[Token]:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def take(self) -> Optional[Token]:
        if self.i < len(self.toks):
            t = self.toks[self.i]
            self.i += 1
            return t
        return None

    def skip_spaces(self) -> None:
        while self.i < len(self.toks) and _is_space(self.toks[self.i]):
            self.i += 1

    def read_star(self) -> bool:
        self.skip_spaces()
        t = self.peek()
        if t is not None and t.is_char(text="*"):
            self.i += 1
            return True
        return False

    def read_optional(self) -> Optional[List[Token]]:
        self.skip_spaces()
        t = self.peek()
        if t is None or not t.is_char(text="["):
            return None
        self.i += 1
        out, level = [], 0
        while self.i < len(self.toks):
            x = self.take()
            if _is_begin_group(x):
                level += 1
            elif _is_end_group(x):
                level -= 1
            elif x.is_char(text="]") and level == 0:
                return out
            out.append(x)
        return out

    def read_group(self) -> Optional[List[Token]]:
        """A braced argument (without braces), a single token, or None."""
        self.skip_spaces()
        t = self.peek()
        if t is None:
            return None
        if not _is_begin_group(t):
            if _is_end_group(t):
                return None
            self.i += 1
            return [t]
        self.i += 1
        out, level = [], 1
        while self.i < len(self.toks):
            x = self.take()
            if _is_begin_group(x):
                level += 1
            elif _is_end_group(x):
                level -= 1
                if level == 0:
                    return out
            out.append(x)
        return out

    def open_group_arg(self) -> bool:
        """Consume the ``{`` of an argument handled by a frame."""
        self.skip_spaces()
        t = self.peek()
        if t is not None and _is_begin_group(t):
            self.i += 1
            self.level += 1
            return True
        return False

    def text_of(self, toks: Sequence[Token]) -> str:
        return "".join(t.text for t in toks if t.kind == CHAR).strip()

    # -- inline insertion --

    def _redirect_index(self) -> int:
        for k in range(len(self.frames) - 1, -1, -1):
            if self.frames[k].redirect:
                return k
        return -1

    def _ensure_paragraph(self) -> DocNode:
        if self.para is None:
            self.para = DocNode("paragraph")
            self.containers[-1].children.append(self.para)
        return self.para

    def inline_base(self) -> DocNode:
        r = self._redirect_index()
        if r >= 0:
            base = self.frames[r].node
            start = r + 1
        else:
            base = self._ensure_paragraph()
            start = 0
        for fr in self.frames[start:]:
            if fr.kind == "env-guard":
                continue
            if fr.node is None:
                fr.node = DocNode(fr.kind, dict(fr.attrs))
                base.children.append(fr.node)
            base = fr.node
        return base

    def add_inline(self, node: DocNode) -> None:
        self.inline_base().children.append(node)

    def add_text(self, text: str, span: Span) -> None:
        if text == "":
            return
        if text == " ":
            # spaces never open a paragraph
            if self._redirect_index() < 0 and self.para is None:
                return
            text = " "
        base = self.inline_base()
        if base.children and base.children[-1].kind == "text-run":
            last = base.children[-1]
            if text == " " and last.text.endswith(" "):
                return
            last.text += text
            last.span = (min(last.span[0], span[0]), max(last.span[1], span[1]))
        else:
            if text == " " and not base.children and base.kind == "paragraph":
                return
            base.children.append(DocNode("text-run", span=span, text=text))

    def end_paragraph(self) -> None:
        if self.para is not None:
            _trim(self.para)
            if not self.para.children:
                self.containers[-1].children.remove(self.para)
        self.para = None
        for fr in self.frames:
            if not fr.redirect:
                fr.node = None

    def add_block(self, node: DocNode) -> None:
        r = self._redirect_index()
        if r >= 0:
            self.add_inline(node)
            return
        self.end_paragraph()
        self.containers[-1].children.append(node)

    def push_frame(self, kind, attrs=None, redirect=False, node=None) -> _Frame:
        fr = _Frame(kind, attrs or {}, self.level, redirect, node)
        self.frames.append(fr)
        return fr

    def close_level(self) -> None:
        """The group at ``self.level`` ends."""
        while self.frames and self.frames[-1].level >= self.level:
            fr = self.frames.pop()
            if fr.redirect and fr.node is not None:
                _trim(fr.node)
            if fr.kind == "author-field":
                self.author_node = None
        self.level -= 1

    # -- diagnostics --

    def diag(self, d: Diagnostic) -> None:
        self.diagnostics.append(d)

    # -- main loop --

    def build(self) -> DocNode:
        has_document = any(t.kind == CS and t.text == "begin" and self._env_name_at(k + 1) == "document"
                           for k, t in enumerate(self.toks))
        self.in_preamble = has_document
        while self.i < len(self.toks):
            self.step(self.take())
        self.end_paragraph()
        return self.root

    def _env_name_at(self, k: int) -> Optional[str]:
        if k < len(self.toks) and _is_begin_group(self.toks[k]):
            name = []
            for t in self.toks[k + 1:k + 40]:
                if _is_end_group(t):
                    return "".join(name)
                name.append(t.text)
        return None

    def step(self, t: Token) -> None:
        if t.kind == CHAR:
            self.char(t)
        elif t.kind == CS:
            self.command(t)
        elif t.kind == MARKER:
            self.marker(t)

    def char(self, t: Token) -> None:
        cat = t.cat
        if cat == Catcode.BEGIN_GROUP:
            self.level += 1
            return
        if cat == Catcode.END_GROUP:
            if self.level > 0:
                self.close_level()
            return
        if cat == Catcode.MATH_SHIFT:
            nxt = self.peek()
            if nxt is not None and nxt.kind == CHAR and nxt.cat == Catcode.MATH_SHIFT and nxt.start == t.end:
                self.take()
                self.math(t, "$$", display=True, opener_tok=nxt)
            else:
                self.math(t, "$", display=False)
            return
        if cat == Catcode.ACTIVE:
            if t.text == "~":
                self.text_char("\u00a0", t)
            return
        if cat == Catcode.SPACE:
            if not self.preamble_text():
                self.add_text(" ", t.span)
            return
        if cat in (Catcode.ALIGNMENT, Catcode.PARAMETER, Catcode.SUPERSCRIPT, Catcode.SUBSCRIPT):
            self.diag(error("misplaced-character", f"{t.text!r} outside math or a table", t.span))
            self.text_char(t.text, t)
            return
        self.text_char(t.text, t)

    def preamble_text(self) -> bool:
        """True while text would land in the preamble outside any field."""
        return self.in_preamble and self._redirect_index() < 0

    def preamble_diag(self, span: Span) -> None:
        # one diagnostic per run of stray text, not per character
        last = self.diagnostics[-1] if self.diagnostics else None
        if (last is not None and last.code == "text-in-preamble" and self.source is not None
                and last.span[1] <= span[0] and not self.source[last.span[1]:span[0]].strip()):
            self.diagnostics[-1] = replace(last, span=(last.span[0], span[1]))
            return
        self.diag(error("text-in-preamble", "text before \\begin{document} is ignored", span))

    def text_char(self, ch: str, t: Token) -> None:
        if self.preamble_text():
            if not ch.isspace():
                self.preamble_diag(t.span)
            return
        # ligatures: look back at the previous text
        base = self.inline_base()
        last = base.children[-1] if base.children else None
        if last is not None and last.kind == "text-run" and t.cat == Catcode.OTHER:
            if ch == "-" and last.text.endswith("–") and last.span[1] == t.start:
                last.text = last.text[:-1] + "—"
                last.span = (last.span[0], t.end)
                return
            if ch == "-" and last.text.endswith("-") and last.span[1] == t.start:
                last.text = last.text[:-1] + "–"
                last.span = (last.span[0], t.end)
                return
            if ch == "`" and last.text.endswith("‘") and last.span[1] == t.start:
                last.text = last.text[:-1] + "“"
                last.span = (last.span[0], t.end)
                return
            if ch == "'" and last.text.endswith("’") and last.span[1] == t.start:
                last.text = last.text[:-1] + "”"
                last.span = (last.span[0], t.end)
                return
        if ch == "`":
            ch = "‘"
        elif ch == "'":
            ch = "’"
        self.add_text(ch, t.span)

    # -- commands --

    def command(self, t: Token) -> None:
        name = t.text
        if name == "par":
            if self._redirect_index() >= 0:
                self.add_text(" ", t.span)
            else:
                self.end_paragraph()
            return
        if name == "begin":
            self.begin_env(t)
            return
        if name == "end":
            self.end_env(t)
            return
        if self.preamble_text() and name not in FRONT_COMMANDS:
            self.skip_args_for(name)
            return
        if name in SECTION_DEPTH:
            self.section(t, SECTION_DEPTH[name])
            return
        if name in TEXT_STYLES:
            if self.open_group_arg():
                self.push_frame("emphasis", {"style": TEXT_STYLES[name]})
            return
        if name in DECLARATIONS:
            self.push_frame("emphasis", {"style": DECLARATIONS[name]})
            return
        if name in TEXT_SYMBOLS:
            self.text_char(TEXT_SYMBOLS[name], t) if TEXT_SYMBOLS[name] else None
            return
        if name in ACCENTS:
            self.accent(t)
            return
        if name in ("\\", "newline"):
            self.read_star()
            self.read_optional()
            if self._redirect_index() >= 0 or self.para is not None:
                self.add_inline(DocNode("break", span=t.span))
            return
        if name in ("(", "["):
            self.math(t, name, display=(name == "["))
            return
        if name == "item":
            self.item(t)
            return
        if name == "label":
            self.label(t)
            return
        if name in REF_COMMANDS:
            self.read_star()
            key = self.text_of(self.read_group() or [])
            node = DocNode("ref", {"key": key, "style": REF_COMMANDS[name]}, span=t.span)
            self.refs.append(node)
            self.add_inline(node)
            return
        if name in CITE_COMMANDS:
            self.read_optional()
            self.read_optional()
            keys = [k.strip() for k in self.text_of(self.read_group() or []).split(",") if k.strip()]
            self.add_inline(DocNode("cite", {"keys": keys}, span=t.span))
            return
        if name == "footnote":
            self.read_optional()
            self.counters["footnote"] = self.counters.get("footnote", 0) + 1
            node = DocNode("footnote", {"number": str(self.counters["footnote"])}, span=t.span)
            self.add_inline(node)
            if self.open_group_arg():
                self.push_frame("footnote", redirect=True, node=node)
            return
        if name == "footnotetext":
            self.read_optional()
            self.read_group()
            return
        if name in ("url", "href"):
            self.link(t)
            return
        if name == "verb":
            return
        if name == "today":
            self.add_inline(DocNode("generated", {"what": "today"}, span=t.span))
            return
        if name == "appendix":
            self.appendix = True
            self.counters["section"] = 0
            return
        if name == "multicolumn":
            self.read_group()
            self.read_group()
            return
        if name in FRONT_COMMANDS:
            self.front_command(t)
            return
        if name in IGNORED:
            self.skip_args_for(name)
            return
        if name in ("nonumber", "notag"):
            return
        if name == "tag":
            self.read_star()
            self.read_group()
            return
        if name in ("]", ")"):
            self.diag(error("unbalanced-math", f"\\{name} without an opening delimiter", t.span))
            return
        # a math command in text, or something else the model does not know
        self.diag(error("math-command-in-text", f"\\{name} is only meaningful in math", t.span))
        verbatim = self.slice_or(t.span, "\\" + name)
        self.add_inline(DocNode("fallback-blob", {"display": "inline", "construct": name},
                                span=t.span, verbatim=verbatim, verbatim_span=self.exact_range(t.span, verbatim)))

    def skip_args_for(self, name: str) -> None:
        n = IGNORED.get(name, 0)
        if n:
            self.read_star()
            self.read_optional()
            for _ in range(n):
                self.read_group()

    def exact_range(self, span: Optional[Span], text: str) -> Optional[Span]:
        """``span`` trimmed to ``text`` when the source there reads exactly ``text``."""
        if self.source is None or span is None:
            return None
        end = span[0] + len(text)
        if end <= span[1] and self.source[span[0]:end] == text and not self.source[end:span[1]].strip():
            return (span[0], end)
        return None

    def slice_or(self, span: Optional[Span], fallback: str) -> str:
        if self.source is not None and span is not None:
            s = self.source[span[0]:span[1]]
            if s.startswith(fallback) or fallback.startswith(s[:1]):
                return s.rstrip() if s.strip() == fallback.strip() else fallback
        return fallback

    def accent(self, t: Token) -> None:
        arg = self.read_group() or []
        base = ""
        for x in arg:
            if x.kind == CHAR:
                base += x.text
            elif x.kind == CS and x.text in TEXT_SYMBOLS:
                base += TEXT_SYMBOLS[x.text]
        if not base:
            base = " "
        ch = unicodedata.normalize("NFC", base[0] + ACCENTS[t.text]) + base[1:]
        end = arg[-1].end if arg else t.end
        self.add_text(ch, (t.start, max(end, t.end)))

    def link(self, t: Token) -> None:
        nxt = self.peek()
        if nxt is not None and nxt.kind == MARKER and nxt.data is not None and nxt.data.kind == "verbatim":
            self.take()
            url = nxt.data.verbatim
        else:
            url = self.text_of(self.read_group() or [])
        node = DocNode("link", {"href": url}, span=t.span)
        self.add_inline(node)
        if t.text == "url":
            node.children.append(DocNode("text-run", span=t.span, text=url))
        elif self.open_group_arg():
            self.push_frame("link", redirect=True, node=node)

    def label(self, t: Token) -> None:
        key = self.text_of(self.read_group() or [])
        if not key:
            return
        target = self.last_target
        number = "" if target is None else str(target.attrs.get("number", ""))
        if key in self.labels:
            self.diag(warning("duplicate-label", f"label {key!r} defined twice", t.span))
        anchor = "label-" + _anchor(key)
        self.labels[key] = (number, anchor)
        if target is not None:
            target.attrs.setdefault("id", anchor)

    # -- sections --

    def section(self, t: Token, depth: int) -> None:
        star = self.read_star()
        self.read_optional()
        self.end_paragraph()
        # leave any enclosing sections of equal or deeper level
        while len(self.containers) > 1 and self.containers[-1].kind == "section" \
                and self.containers[-1].attrs["depth"] >= depth:
            self.containers.pop()
        node = DocNode("section", {"depth": depth}, span=t.span)
        if not star and depth <= NUMBERED_DEPTH:
            node.attrs["number"] = self.section_number(depth)
            self.last_target = node
        self.containers[-1].children.append(node)
        self.containers.append(node)
        heading = DocNode("heading", span=t.span)
        node.children.append(heading)
        if self.open_group_arg():
            self.push_frame("heading", redirect=True, node=heading)

    def section_number(self, depth: int) -> str:
        names = ["section", "subsection", "subsubsection"]
        key = names[depth - 1]
        self.counters[key] = self.counters.get(key, 0) + 1
        for deeper in names[depth:]:
            self.counters[deeper] = 0
        parts = []
        for d in range(depth):
            n = self.counters.get(names[d], 0)
            parts.append(_alpha(n) if d == 0 and self.appendix else str(n))
        return ".".join(parts)

    # -- lists --

    def item(self, t: Token) -> None:
        label = self.read_optional()
        idx = None
        for k in range(len(self.containers) - 1, -1, -1):
            if self.containers[k].kind == "list":
                idx = k
                break
        if idx is None:
            self.diag(error("item-outside-list", "\\item outside a list", t.span))
            self.end_paragraph()
            return
        self.end_paragraph()
        del self.containers[idx + 1:]
        lst = self.containers[idx]
        node = DocNode("list-item", span=t.span)
        if lst.attrs.get("type") == "enumerate":
            self.counters["item"] = self.counters.get("item", 0)
            n = sum(1 for c in lst.children if c.kind == "list-item") + 1
            node.attrs["number"] = str(n)
            self.last_target = node
        lst.children.append(node)
        self.containers.append(node)
        if label is not None:
            head = DocNode("heading", span=t.span)
            head.children = self.inline_nodes(label)
            node.children.append(head)

    def inline_nodes(self, toks: Sequence[Token]) -> List[DocNode]:
        """Inline content of a token slice, built with the shared counters."""
        sub = _Builder(toks, self.source, self.theorems, self.shared)
        holder = DocNode("holder")
        sub.push_frame("holder", redirect=True, node=holder)
        sub.root.children.clear()
        while sub.i < len(sub.toks):
            sub.step(sub.take())
        self.diagnostics.extend(sub.diagnostics)
        _trim(holder)
        return holder.children

    # -- environments --

    def read_env_name(self) -> Tuple[str, Optional[Token]]:
        t = self.peek()
        if t is None or not _is_begin_group(t):
            return "", None
        toks = self.read_group() or []
        close = self.toks[self.i - 1] if self.i > 0 else None
        return "".join(x.text for x in toks), close

    def begin_env(self, t: Token) -> None:
        name, close = self.read_env_name()
        if name == "document":
            self.in_preamble = False
            return
        if self.in_preamble:
            self.skip_env(name)
            return
        if name in LIST_ENVS:
            node = DocNode("list", {"type": LIST_ENVS[name]}, span=t.span)
            self.add_block(node)
            self.containers.append(node)
            self.level += 1
            self.push_frame("env-guard")
            self.frames[-1].attrs["env"] = name
            return
        if name in BLOCK_ENVS or name in self.theorems:
            self.block_env(t, name)
            return
        if name in DISPLAY_ENVS or name in GROUP_ENVS:
            self.display_env(t, name, close)
            return
        if name in TABLE_ENVS:
            self.table_env(t, name)
            return
        self.unknown_env(t, name, close)

    def skip_env(self, name: str) -> None:
        depth = 1
        while self.i < len(self.toks):
            x = self.take()
            if x.kind == CS and x.text in ("begin", "end") and self._env_name_at(self.i) == name:
                depth += 1 if x.text == "begin" else -1
                self.read_env_name()
                if depth == 0:
                    return

    def block_env(self, t: Token, name: str) -> None:
        attrs: Dict[str, object] = {"env": name}
        if name in BLOCK_ENVS:
            attrs["role"] = BLOCK_ENVS[name]
        else:
            thm = self.theorems[name]
            attrs["role"] = "theorem"
            attrs["label"] = thm.label or name
            if thm.counter:
                self.counters["thm:" + thm.counter] = self.counters.get("thm:" + thm.counter, 0) + 1
                attrs["number"] = str(self.counters["thm:" + thm.counter])
        node = DocNode("block", attrs, span=t.span)
        opt = self.read_optional()
        self.add_block(node)
        if attrs.get("number"):
            self.last_target = node
        if opt is not None:
            head = DocNode("heading", span=t.span)
            head.children = self.inline_nodes(opt)
            node.children.append(head)
        self.containers.append(node)
        self.level += 1
        self.push_frame("env-guard", {"env": name})

    def end_env(self, t: Token) -> None:
        name, _ = self.read_env_name()
        if name == "document" or self.in_preamble:
            return
        # pop inline frames and containers opened inside the environment
        guard = None
        for k in range(len(self.frames) - 1, -1, -1):
            if self.frames[k].kind == "env-guard" and self.frames[k].attrs.get("env") == name:
                guard = k
                break
        if guard is None:
            return
        self.end_paragraph()
        while len(self.frames) > guard:
            self.close_level()
        for k in range(len(self.containers) - 1, 0, -1):
            c = self.containers[k]
            if c.kind in ("list", "block") and c.attrs.get("env", c.attrs.get("type")) == name:
                del self.containers[k:]
                break

    def collect_env_body(self, name: str) -> Tuple[List[Token], Optional[Token], Optional[Token]]:
        """Tokens up to the matching ``\\end{name}``; returns (body, end, close)."""
        body: List[Token] = []
        depth = 1
        while self.i < len(self.toks):
            x = self.take()
            if x.kind == CS and x.text in ("begin", "end") and self._env_name_at(self.i) == name:
                depth += 1 if x.text == "begin" else -1
                if depth == 0:
                    _, close = self.read_env_name()
                    return body, x, close
                start = self.i
                self.read_env_name()
                body.append(x)
                body.extend(self.toks[start:self.i])
                continue
            body.append(x)
        return body, None, None

    def source_slice(self, a: Optional[Token], b: Optional[Token]):
        """Source text strictly between tokens ``a`` and ``b`` when spans allow."""
        if self.source is None or a is None or b is None or a.end > b.start:
            return None
        return a.end, b.start

    def unknown_env(self, t: Token, name: str, close: Optional[Token]) -> None:
        body, end, end_close = self.collect_env_body(name)
        if end is None:
            self.diag(error("unterminated-environment", f"\\begin{{{name}}} is never ended", t.span))
        rng = self.source_slice(close, end)
        verbatim = self.source[rng[0]:rng[1]] if rng else detokenize(body)
        span = (t.start, end_close.end if end_close is not None else (body[-1].end if body else t.end))
        self.diag(error("unsupported-environment", f"{{{name}}} is not supported here", t.span))
        self.add_block(DocNode("fallback-blob", {"display": "block", "construct": name},
                               span=span, verbatim=verbatim, verbatim_span=rng))

    def table_env(self, t: Token, name: str) -> None:
        if name == "tabular*":
            self.read_group()
        self.read_optional()
        spec = self.text_of(self.read_group() or [])
        body, end, end_close = self.collect_env_body(name)
        if end is None:
            self.diag(error("unterminated-environment", f"\\begin{{{name}}} is never ended", t.span))
        span = (t.start, end_close.end if end_close is not None else t.end)
        self.diag(warning("fallback-dialect", f"{{{name}}} rendered as a simple table", t.span))
        node = DocNode("table-fallback", {"env": name, "columns": spec}, span=span)
        for row in _split_rows(body):
            r = DocNode("table-row")
            for cell in _split_cells(row):
                c = DocNode("table-cell")
                c.children = self.inline_nodes(cell)
                r.children.append(c)
            if any(c.children for c in r.children):
                node.children.append(r)
        self.add_block(node)

    # -- math --

    def next_math_index(self) -> int:
        n = self.math_index[0]
        self.math_index[0] += 1
        return n

    def math(self, t: Token, opener: str, display: bool, opener_tok: Optional[Token] = None) -> None:
        closer = {"$": "$", "$$": "$$", "(": ")", "[": "]"}[opener]
        body: List[Token] = []
        end_tok = None
        depth = 0
        while self.i < len(self.toks):
            x = self.take()
            if x.kind == CHAR and x.cat == Catcode.MATH_SHIFT and closer in ("$", "$$") and depth == 0:
                if closer == "$$":
                    nxt = self.peek()
                    if nxt is not None and nxt.kind == CHAR and nxt.cat == Catcode.MATH_SHIFT:
                        self.take()
                        end_tok = x
                        break
                    self.diag(error("unterminated-math", "display math closed by a single $", x.span))
                    end_tok = x
                    break
                end_tok = x
                break
            if x.kind == CS and x.text == closer and closer in (")", "]"):
                end_tok = x
                break
            if x.kind == CS and x.text == "par":
                self.i -= 1
                break
            if _is_begin_group(x):
                depth += 1
            elif _is_end_group(x):
                depth -= 1
            body.append(x)
        if end_tok is None:
            self.diag(error("unterminated-math", f"math opened with {opener} is never closed", t.span))
        start_tok = opener_tok or t
        end_span_tok = end_tok if end_tok is not None else (body[-1] if body else t)
        rng = self.source_slice(start_tok, end_tok) if end_tok is not None else None
        if rng is None and end_tok is not None and self.source is not None and start_tok.span == end_tok.span:
            # both shifts come from one macro invocation: the formula's source is that call
            rng = start_tok.span
        leaf = self.make_leaf(body, rng, display, t, end_span_tok)
        if leaf is None:
            return
        if opener == "$$" and end_tok is not None:
            leaf.span = (leaf.span[0], end_tok.end + 1)
        if display:
            eq = DocNode("equation", {"env": "displaymath"}, [leaf], span=leaf.span)
            self.add_block(eq)
        else:
            self.add_inline(leaf)

    def make_leaf(self, body: List[Token], rng, display: bool, t: Token, end_tok: Token,
                  number: Optional[str] = None) -> Optional[DocNode]:
        toks = _strip_math_extras(body)
        if rng is not None:
            raw = self.source[rng[0]:rng[1]]
            lead = len(raw) - len(raw.lstrip())
            trail = len(raw) - len(raw.rstrip())
            vs = (rng[0] + lead, rng[1] - trail)
            verbatim = self.source[vs[0]:vs[1]]
        else:
            verbatim = detokenize(body).strip()
            vs = None
        if not verbatim:
            if toks:
                verbatim = detokenize(toks).strip()
            if not verbatim:
                self.diag(warning("empty-math", "empty math formula dropped", t.span))
                return None
        leaf = DocNode("math", {"display": "block" if display else "inline", "index": self.next_math_index()},
                       span=(t.start, max(end_tok.end, t.end)), tokens=tuple(toks),
                       verbatim=verbatim, verbatim_span=vs)
        return leaf

    def display_env(self, t: Token, name: str, close: Optional[Token]) -> None:
        body, end, end_close = self.collect_env_body(name)
        if end is None:
            self.diag(error("unterminated-environment", f"\\begin{{{name}}} is never ended", t.span))
        numbered = not name.endswith("*") and name not in ("displaymath", "math")
        span = (t.start, end_close.end if end_close is not None else (body[-1].end if body else t.end))
        if name in GROUP_ENVS:
            group = DocNode("equation-group", {"env": name}, span=span)
            rows = _split_rows(body, keep_separators=True)
            prev = close
            for k, (row, sep) in enumerate(rows):
                stop = sep if sep is not None else end
                rng = self.source_slice(prev, stop)
                if not [x for x in row if not _is_space(x)]:
                    prev = sep
                    continue
                eq = self.numbered_equation(row, rng, prev or t, stop or t, numbered, name)
                if eq is not None:
                    group.children.append(eq)
                prev = sep
            if group.children:
                self.add_block(group)
            return
        rng = self.source_slice(close, end)
        eq = self.numbered_equation(body, rng, close or t, end or t, numbered, name)
        if eq is not None:
            eq.span = span
            self.add_block(eq)

    def numbered_equation(self, toks, rng, first: Token, last: Token, numbered: bool, env: str):
        leaf = self.make_leaf(toks, rng, True, first, last)
        if leaf is None:
            return None
        eq = DocNode("equation", {"env": env}, [leaf], span=leaf.span)
        tag = _find_tag(toks)
        if tag is not None:
            eq.attrs["number"] = tag
            eq.attrs["tagged"] = True
        elif numbered and not _has_cs(toks, ("nonumber", "notag")):
            self.counters["equation"] = self.counters.get("equation", 0) + 1
            eq.attrs["number"] = str(self.counters["equation"])
        saved = self.last_target
        self.last_target = eq
        for key in _find_labels(toks):
            if "number" not in eq.attrs:
                self.diag(warning("label-unnumbered", f"label {key!r} on an unnumbered equation", leaf.span))
            anchor = "label-" + _anchor(key)
            self.labels[key] = (str(eq.attrs.get("number", "")), anchor)
            eq.attrs.setdefault("id", anchor)
        if "number" not in eq.attrs:
            self.last_target = saved
        return eq

    # -- markers --

    def marker(self, t: Token) -> None:
        info = t.data
        kind = info.kind if info is not None else "undefined"
        if self.in_preamble:
            return
        if kind == "undefined":
            verbatim = "\\" + t.text
            self.add_inline(DocNode("fallback-blob", {"display": "inline", "construct": t.text},
                                    span=t.span, verbatim=verbatim, verbatim_span=self.exact_range(t.span, verbatim)))
        elif kind == "conditional":
            self.add_inline(DocNode("fallback-blob", {"display": "inline", "construct": t.text},
                                    span=t.span, verbatim=info.verbatim, verbatim_span=info.inner))
        elif kind == "environment":
            self.add_block(DocNode("fallback-blob", {"display": "block", "construct": t.text},
                                   span=t.span, verbatim=info.verbatim, verbatim_span=info.inner))
        elif kind == "table":
            self.add_block(DocNode("fallback-blob", {"display": "block", "construct": t.text},
                                   span=t.span, verbatim=info.verbatim, verbatim_span=info.inner))
        elif kind == "verbatim":
            if t.text in ("verb", "url"):
                if t.text == "verb":
                    self.add_inline(DocNode("code", {"display": "inline"}, span=t.span,
                                            verbatim=info.verbatim, verbatim_span=info.inner))
                return
            self.add_block(DocNode("code", {"display": "block", "env": t.text}, span=t.span,
                                   verbatim=info.verbatim, verbatim_span=info.inner))

    # -- frontmatter --

    def field(self, name: str, t: Token, parent: Optional[DocNode] = None, **attrs) -> DocNode:
        node = DocNode("field", {"name": name, **attrs}, span=t.span)
        (parent or self.front).children.append(node)
        return node

    def front_command(self, t: Token) -> None:
        name = t.text
        if name == "title":
            self.read_optional()
            node = self.field("title", t)
            if self.open_group_arg():
                self.push_frame("field", redirect=True, node=node)
            return
        if name == "author":
            opt = self.read_optional()
            if self.open_group_arg():
                self.new_author(t)
                keys = self.text_of(opt) if opt else ""
                refs = [k.strip() for k in keys.split(",") if k.strip()]
                if refs:  # authblk: \author[1,2]{Name}
                    self.author_node.attrs["refs"] = refs
            return
        if name == "and":
            if self.author_node is not None:
                _trim(self.author_node)
                # close the current author and start the next one at the same level
                while self.frames and self.frames[-1].kind != "author-field":
                    self.frames.pop()
                if self.frames:
                    self.frames.pop()
                self.new_author(t)
            elif self.frames and self.frames[-1].kind == "institute-field":
                self.frames.pop()
                self.new_institute(t)
            else:
                self.add_text(" ", t.span)
            return
        if name == "inst":
            keys = self.text_of(self.read_group() or [])
            target = self.author_node
            if target is None:
                return
            refs = target.attrs.setdefault("refs", [])
            refs.extend(k.strip() for k in keys.split(",") if k.strip())
            return
        if name == "institute":
            if self.open_group_arg():
                self.new_institute(t)
            return
        if name in ("affiliation", "affil", "address"):
            opt = self.read_optional()
            key = self.text_of(opt) if opt else None
            existing = [c for c in self.front.children if c.attrs.get("name") == "affiliation"]
            if key is None:
                key = str(len(existing) + 1)
                for a in self.front.children:
                    if a.attrs.get("name") == "author" and not a.attrs.get("refs"):
                        a.attrs["refs"] = [key]
            node = self.field("affiliation", t, key=key)
            if self.open_group_arg():
                self.push_frame("field", redirect=True, node=node)
            return
        if name in ("email", "orcidID", "thanks"):
            value = self.read_group() or []
            parent = self.author_node
            if parent is not None:
                _trim(parent)
            node = self.field(name, t, parent=parent)
            node.children = self.inline_nodes(value)
            return
        if name in ("date", "keywords"):
            self.read_optional()
            node = self.field(name, t)
            if self.open_group_arg():
                self.push_frame("field", redirect=True, node=node)
            return
        if name == "maketitle":
            return

    def new_author(self, t: Token) -> None:
        node = self.field("author", t)
        self.author_node = node
        self.push_frame("author-field", redirect=True, node=node)

    def new_institute(self, t: Token) -> None:
        existing = [c for c in self.front.children if c.attrs.get("name") == "affiliation"]
        node = self.field("affiliation", t, key=str(len(existing) + 1))
        self.push_frame("institute-field", redirect=True, node=node)


FRONT_COMMANDS = {"title", "author", "and", "inst", "institute", "affiliation", "affil",
                  "address", "email", "orcidID", "thanks", "date", "keywords", "maketitle",
                  "titlerunning", "authorrunning"}


def _anchor(key: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in key)


_INLINE_CONTAINERS = ("emphasis", "link")


def _blank(n: DocNode) -> bool:
    return n.kind == "text-run" and not n.text.strip(" ")


def _trim(node: DocNode) -> None:
    """Strip leading and trailing blanks from a container's text."""
    _trim_side(node, 0)
    _trim_side(node, -1)


def _trim_side(node: DocNode, side: int) -> None:
    while node.children:
        c = node.children[side]
        if _blank(c):
            node.children.pop(side)
            continue
        if c.kind == "text-run":
            c.text = c.text.lstrip(" ") if side == 0 else c.text.rstrip(" ")
        elif c.kind in _INLINE_CONTAINERS:
            _trim_side(c, side)
            if not c.children:
                node.children.pop(side)
                continue
        return


def _has_cs(toks, names) -> bool:
    return any(t.kind == CS and t.text in names for t in toks)


def _group_after(toks, k):
    """Text of the braced group starting at index ``k`` and the index after it."""
    while k < len(toks) and _is_space(toks[k]):
        k += 1
    if k < len(toks) and toks[k].is_char(text="*"):
        k += 1
    if k >= len(toks) or not _is_begin_group(toks[k]):
        return None, k
    level = 0
    for j in range(k, len(toks)):
        if _is_begin_group(toks[j]):
            level += 1
        elif _is_end_group(toks[j]):
            level -= 1
            if level == 0:
                return "".join(x.text for x in toks[k + 1:j]), j + 1
    return None, len(toks)


def _find_labels(toks) -> List[str]:
    out = []
    for k, t in enumerate(toks):
        if t.kind == CS and t.text == "label":
            key, _ = _group_after(toks, k + 1)
            if key:
                out.append(key.strip())
    return out


def _find_tag(toks) -> Optional[str]:
    for k, t in enumerate(toks):
        if t.kind == CS and t.text == "tag":
            key, _ = _group_after(toks, k + 1)
            if key is not None:
                return key.strip()
    return None


def _strip_math_extras(toks: Sequence[Token]) -> List[Token]:
    out: List[Token] = []
    k = 0
    while k < len(toks):
        t = toks[k]
        if t.kind == CS and t.text in ("label", "tag"):
            _, nk = _group_after(toks, k + 1)
            k = nk
            continue
        if t.kind == CS and t.text in ("nonumber", "notag"):
            k += 1
            continue
        out.append(t)
        k += 1
    return out


def _split_rows(toks: Sequence[Token], keep_separators: bool = False):
    rows, cur, level = [], [], 0
    seps = []
    k = 0
    while k < len(toks):
        t = toks[k]
        if _is_begin_group(t):
            level += 1
        elif _is_end_group(t):
            level -= 1
        if t.kind == CS and t.text in ("begin",):
            level += 1
        elif t.kind == CS and t.text in ("end",):
            level -= 1
        if level == 0 and t.kind == CS and t.text in ("\\", "cr"):
            rows.append(cur)
            seps.append(t)
            cur = []
            # optional spacing argument after the row break
            j = k + 1
            while j < len(toks) and _is_space(toks[j]):
                j += 1
            if j < len(toks) and toks[j].is_char(text="["):
                while j < len(toks) and not toks[j].is_char(text="]"):
                    j += 1
                k = j
            k += 1
            continue
        cur.append(t)
        k += 1
    rows.append(cur)
    seps.append(None)
    if keep_separators:
        return list(zip(rows, seps))
    return [r for r in rows if any(not _is_space(x) and not x.is_cs("hline") for x in r)]


def _split_cells(row: Sequence[Token]) -> List[List[Token]]:
    cells, cur, level = [], [], 0
    for t in row:
        if _is_begin_group(t) or t.is_cs("begin"):
            level += 1
        elif _is_end_group(t) or t.is_cs("end"):
            level -= 1
        if level == 0 and t.kind == CHAR and t.cat == Catcode.ALIGNMENT:
            cells.append(cur)
            cur = []
            continue
        cur.append(t)
    cells.append(cur)
    return cells


def _finalize_spans(node: DocNode) -> Optional[Span]:
    spans = [node.span] if node.span is not None else []
    for c in node.children:
        s = _finalize_spans(c)
        if s is not None:
            spans.append(s)
    if spans:
        node.span = (min(s[0] for s in spans), max(s[1] for s in spans))
    return node.span


def build_document(tokens: Sequence[Token], source: Optional[str] = None, *,
                   theorems: Optional[Mapping[str, object]] = None):
    """Build the document tree; returns ``(tree, diagnostics)``.

    ``source`` enables verbatim slices for math and fallback blobs.
    ``theorems`` maps theorem-like environment names to their definitions.
    """
    b = _Builder(tokens, source, dict(theorems or {}))
    root = b.build()
    for fr in b.frames:
        if fr.kind == "env-guard":
            b.diag(error("unterminated-environment",
                         f"\\begin{{{fr.attrs.get('env')}}} is never ended"))
    # second pass: resolve references
    for ref in b.refs:
        key = ref.attrs["key"]
        if key in b.labels:
            number, anchor = b.labels[key]
            ref.attrs["number"] = number or "??"
            ref.attrs["target"] = anchor
        else:
            ref.attrs["number"] = "??"
            b.diag(warning("undefined-reference", f"reference to undefined label {key!r}", ref.span))
    _drop_empty_fields(root)
    _finalize_spans(root)
    if not root.children[0].children and root.children[0].kind == "frontmatter":
        pass
    return root, b.diagnostics


def _drop_empty_fields(root: DocNode) -> None:
    for node in iter_nodes(root):
        if node.kind in ("field",):
            _trim(node)


# -- traversal and dump --

def iter_nodes(tree: DocNode) -> Iterator[DocNode]:
    stack = [tree]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


def walk(tree: DocNode, visitor: Callable[[DocNode], object]) -> List[object]:
    """Depth-first pre-order visit; returns the visitor's non-None results."""
    out = []
    for n in iter_nodes(tree):
        r = visitor(n)
        if r is not None:
            out.append(r)
    return out


def math_leaves(tree: DocNode) -> List[DocNode]:
    return [n for n in iter_nodes(tree) if n.kind == "math"]


def dump(tree: DocNode) -> str:
    lines: List[str] = []

    def rec(n: DocNode, depth: int) -> None:
        parts = [n.kind]
        for k in sorted(n.attrs):
            if k == "index":
                continue
            parts.append(f"{k}={json.dumps(n.attrs[k], ensure_ascii=False)}")
        if n.kind == "text-run":
            parts.append(json.dumps(n.text, ensure_ascii=False))
        if n.verbatim is not None:
            parts.append("verbatim=" + json.dumps(n.verbatim, ensure_ascii=False))
        if n.span is not None:
            parts.append(f"@{n.span[0]}-{n.span[1]}")
        lines.append("  " * depth + " ".join(parts))
        for c in n.children:
            rec(c, depth + 1)

    rec(tree, 0)
    return "\n".join(lines) + "\n"


# -- frontmatter --

def extract_frontmatter(tree: DocNode) -> Frontmatter:
    fm = Frontmatter()
    front = next((c for c in tree.children if c.kind == "frontmatter"), None)
    fields = front.children if front is not None else []
    for f in fields:
        name = f.attrs.get("name")
        if name == "title" and fm.title is None:
            fm.title = f
        elif name == "affiliation":
            fm.affiliations[str(f.attrs.get("key"))] = f
        elif name in ("date", "keywords"):
            fm.metadata[name] = _norm_ws(f.text_content())
    for f in fields:
        if f.attrs.get("name") != "author":
            continue
        text_children = [c for c in f.children if not (c.kind == "field")]
        holder = DocNode("field", dict(f.attrs), text_children, f.span)
        author = Author(_norm_ws(holder.text_content()), node=holder)
        for c in f.children:
            if c.kind == "field" and c.attrs.get("name") == "email":
                author.email = _norm_ws(c.text_content())
        for ref in f.attrs.get("refs", []):
            if ref in fm.affiliations:
                author.affiliation_refs.append(ref)
            else:
                fm.diagnostics.append(warning("dangling-affiliation",
                                              f"author {author.name!r} refers to missing affiliation {ref!r}",
                                              f.span))
        if author.name:
            fm.authors.append(author)
    if fm.title is None or not fm.title.text_content().strip():
        fm.title = None
        fm.diagnostics.append(warning("missing-title", "document has no title"))
    return fm
