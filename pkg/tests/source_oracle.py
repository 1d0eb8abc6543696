"""Expected visible text of a LaTeX source, computed without the converter.

Handles a deliberately small subset: comments, title and author, sections,
text styles, lists, abstract/quote/theorem-like blocks, labels and
references, inline and display math, ligatures and escaped characters.
``normalize_source`` returns None when the source uses anything else.
"""

from __future__ import annotations

import re
from typing import List, Optional

DROPPED = {"maketitle", "item", "label", "ref", "eqref", "noindent", "centering", "par", "newline"}
UNWRAPPED = {"emph", "textbf", "textit", "texttt", "textsf", "textsc", "textrm", "underline",
             "section", "subsection", "subsubsection", "paragraph", "section*", "subsection*"}
SILENT_ENVS = {"itemize", "enumerate", "abstract", "quote", "quotation", "theorem", "lemma", "proof",
               "definition", "corollary", "proposition", "center"}
MATH_ENVS = {"equation", "equation*", "displaymath"}
PREAMBLE_IGNORED = {"documentclass", "usepackage", "newtheorem"}
LIGATURES = [("---", "\u2014"), ("--", "\u2013"), ("``", "\u201c"), ("''", "\u201d")]
ESCAPES = {"%": "%", "&": "&", "$": "$", "#": "#", "_": "_", "{": "{", "}": "}", " ": " ", ",": " "}
# \label, \ref and \eqref arguments are keys, not text
KEY_ARGS = {"label", "ref", "eqref"}


class _Unsupported(Exception):
    pass


def strip_comments(src: str) -> str:
    return re.sub(r"(?<!\\)%[^\n]*\n?", "", src)


def _group(s: str, i: int):
    """(content, index after the closing brace) for a brace group starting at s[i]."""
    if i >= len(s) or s[i] != "{":
        raise _Unsupported("expected a group")
    depth = 0
    for j in range(i, len(s)):
        c = s[j]
        if c == "\\":
            continue
        if c == "{" and s[j - 1] != "\\":
            depth += 1
        elif c == "}" and s[j - 1] != "\\":
            depth -= 1
            if depth == 0:
                return s[i + 1:j], j + 1
    raise _Unsupported("unbalanced group")


def _find(s: str, needle: str, i: int) -> int:
    j = s.find(needle, i)
    if j < 0:
        raise _Unsupported(f"missing {needle}")
    return j


def _text(s: str) -> str:
    out: List[str] = []
    i = 0
    while i < len(s):
        c = s[i]
        if c == "$":
            if s.startswith("$$", i):
                raise _Unsupported("$$")
            j = _find(s, "$", i + 1)
            out.append(s[i + 1:j].strip())
            i = j + 1
        elif s.startswith("\\(", i) or s.startswith("\\[", i):
            close = "\\)" if s[i + 1] == "(" else "\\]"
            j = _find(s, close, i + 2)
            math = s[i + 2:j].strip()
            out.append(math if close == "\\)" else f" {math} ")
            i = j + 2
        elif c == "\\":
            m = re.match(r"\\([A-Za-z]+\*?)\s*", s[i:])
            if m is None:
                sym = s[i + 1:i + 2]
                if sym == "\\":
                    out.append(" ")
                elif sym in ESCAPES:
                    out.append(ESCAPES[sym])
                else:
                    raise _Unsupported(f"control symbol \\{sym}")
                i += 2
                continue
            name = m.group(1)
            i += m.end()
            if name in ("begin", "end"):
                env, i = _group(s, i)
                if name == "begin" and env in MATH_ENVS:
                    j = _find(s, f"\\end{{{env}}}", i)
                    out.append(f" {s[i:j].strip()} ")
                    i = j + len(f"\\end{{{env}}}")
                elif env in SILENT_ENVS:
                    out.append(" ")
                    if name == "begin" and s.startswith("[", i):  # optional block heading
                        j = _find(s, "]", i)
                        out.append(_text(s[i + 1:j]) + " ")
                        i = j + 1
                else:
                    raise _Unsupported(f"environment {env}")
            elif name in KEY_ARGS:
                _, i = _group(s, i)
                out.append(" " if name == "label" else "")
            elif name in DROPPED:
                out.append(" ")
            elif name in UNWRAPPED:
                inner, i = _group(s, i)
                out.append(f" {_text(inner)} " if name.rstrip("*") in ("section", "subsection",
                                                                        "subsubsection", "paragraph")
                           else _text(inner))
            else:
                raise _Unsupported(f"command \\{name}")
        elif c in "{}":
            i += 1
        elif c == "~":
            out.append(" ")
            i += 1
        elif c in "&#^_" or (ord(c) < 32 and c not in "\t\n\r") or c == "\x7f":
            raise _Unsupported(f"special character {c!r}")
        elif any(s.startswith(a, i) for a, _ in LIGATURES):
            a, b = next((a, b) for a, b in LIGATURES if s.startswith(a, i))
            out.append(b)
            i += len(a)
        else:
            out.append(c)
            i += 1
    return "".join(out)


def collapse(text: str) -> str:
    return " ".join(text.split())


def normalize_source(src: str) -> Optional[str]:
    """Visible text the page should carry for ``src``, or None outside the subset."""
    try:
        src = strip_comments(src)
        begin = _find(src, "\\begin{document}", 0)
        end = _find(src, "\\end{document}", begin)
        pre, body = src[:begin], src[begin + len("\\begin{document}"):end]
        head: List[str] = []
        i = 0
        while i < len(pre):
            m = re.compile(r"\s*\\([A-Za-z]+)\s*").match(pre, i)
            if m is None:
                if pre[i:].strip():
                    raise _Unsupported("preamble text")
                break
            name = m.group(1)
            i = m.end()
            if name in PREAMBLE_IGNORED:
                if i < len(pre) and pre[i] == "[":
                    i = _find(pre, "]", i) + 1
                while i < len(pre) and pre[i] == "{":
                    _, i = _group(pre, i)
            elif name == "title":
                inner, i = _group(pre, i)
                head.insert(0, _text(inner))
            elif name == "author":
                inner, i = _group(pre, i)
                head.extend(_text(part) for part in inner.split("\\and"))
            else:
                raise _Unsupported(f"preamble command \\{name}")
        return collapse(" ".join(head) + " " + _text(body))
    except _Unsupported:
        return None
