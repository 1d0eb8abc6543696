"""TeX lexical analysis: category codes, tokens and the line state machine.

The character scan runs as a compiled kernel over code-point arrays (see
:mod:`texhtml._accel`); turning its output into :class:`Token` objects and
diagnostics happens here in Python.
"""

from __future__ import annotations

import enum
from typing import Any, Iterator, List, NamedTuple, Optional, Union

import numpy as np

from . import _accel
from .diagnostics import Diagnostic, EndOfInput, InvalidCharacter, error

__all__ = [
    "Catcode", "CatcodeTable", "Token", "Lexer", "default_catcodes",
    "tokenize", "next_expandable", "canonical", "detokenize",
    "CS", "CHAR", "PARAM", "MARKER",
]

UNICODE_SIZE = 0x110000


class Catcode(enum.IntEnum):
    ESCAPE = 0
    BEGIN_GROUP = 1
    END_GROUP = 2
    MATH_SHIFT = 3
    ALIGNMENT = 4
    END_OF_LINE = 5
    PARAMETER = 6
    SUPERSCRIPT = 7
    SUBSCRIPT = 8
    IGNORED = 9
    SPACE = 10
    LETTER = 11
    OTHER = 12
    ACTIVE = 13
    COMMENT = 14
    INVALID = 15


def _code(ch: Union[str, int]) -> int:
    if isinstance(ch, str):
        if len(ch) != 1:
            raise ValueError(f"expected a single character, got {ch!r}")
        return ord(ch)
    if not 0 <= ch < UNICODE_SIZE:
        raise ValueError(f"code point out of range: {ch}")
    return ch


def _build_default() -> np.ndarray:
    arr = np.full(UNICODE_SIZE, Catcode.OTHER, dtype=np.int8)
    for c in range(ord("A"), ord("Z") + 1):
        arr[c] = Catcode.LETTER
    for c in range(ord("a"), ord("z") + 1):
        arr[c] = Catcode.LETTER
    assignments = {
        "\\": Catcode.ESCAPE, "{": Catcode.BEGIN_GROUP, "}": Catcode.END_GROUP,
        "$": Catcode.MATH_SHIFT, "&": Catcode.ALIGNMENT, "\r": Catcode.END_OF_LINE,
        "\n": Catcode.END_OF_LINE, "#": Catcode.PARAMETER, "^": Catcode.SUPERSCRIPT,
        "_": Catcode.SUBSCRIPT, "\x00": Catcode.IGNORED, " ": Catcode.SPACE,
        "\t": Catcode.SPACE, "~": Catcode.ACTIVE, "%": Catcode.COMMENT,
        "\x7f": Catcode.INVALID,
    }
    for ch, cat in assignments.items():
        arr[ord(ch)] = cat
    arr.flags.writeable = False
    return arr


_DEFAULT = _build_default()


class CatcodeTable:
    """Mapping from every code point to a category 0-15.

    Backed by a dense int8 array shared copy-on-write with the table it was
    copied from, so copies are cheap until one of them is mutated.
    """

    __slots__ = ("_arr",)

    def __init__(self, arr: Optional[np.ndarray] = None):
        self._arr = _DEFAULT if arr is None else arr

    def __getitem__(self, ch: Union[str, int]) -> Catcode:
        return Catcode(int(self._arr[_code(ch)]))

    def __setitem__(self, ch: Union[str, int], cat: int) -> None:
        cat = int(cat)
        if not 0 <= cat <= 15:
            raise ValueError(f"category code out of range: {cat}")
        if not self._arr.flags.writeable:
            self._arr = self._arr.copy()
        self._arr[_code(ch)] = cat

    def copy(self) -> "CatcodeTable":
        arr = self._arr
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
            # both sides now share a frozen array and copy on next write
            self._arr = arr
        return CatcodeTable(arr)

    @property
    def array(self) -> np.ndarray:
        return self._arr

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CatcodeTable):
            return NotImplemented
        return self._arr is other._arr or bool(np.array_equal(self._arr, other._arr))

    def __hash__(self):
        raise TypeError("CatcodeTable is mutable")


def default_catcodes() -> CatcodeTable:
    """The plain TeX/LaTeX initial table."""
    return CatcodeTable()


CS = "cs"
CHAR = "char"
PARAM = "param"
MARKER = "marker"


class Token(NamedTuple):
    """One lexical unit.

    ``text`` is the control-sequence name (without escape), the character, the
    parameter index as a digit, or the marker name.  ``start``/``end`` are
    code-point offsets into the source.  ``data`` is only used by marker
    tokens (see the macro engine).
    """

    kind: str
    text: str
    cat: int
    start: int
    end: int
    data: Any = None

    @property
    def span(self):
        return (self.start, self.end)

    def is_cs(self, name: Optional[str] = None) -> bool:
        return self.kind == CS and (name is None or self.text == name)

    def is_char(self, cat: Optional[int] = None, text: Optional[str] = None) -> bool:
        return (self.kind == CHAR and (cat is None or self.cat == cat)
                and (text is None or self.text == text))

    @property
    def meaning(self):
        """The span-free identity of the token."""
        return (self.kind, self.text, self.cat)

    def __repr__(self) -> str:
        return f"<{canonical(self)}>"


def canonical(tok: Token) -> str:
    """Stable single-line rendering used for dumps and determinism checks."""
    if tok.kind == CS:
        body = f"cs:{tok.text}"
    elif tok.kind == CHAR:
        body = f"char:{tok.text!r}/{tok.cat}"
    elif tok.kind == PARAM:
        body = f"param:{tok.text}"
    else:
        body = f"marker:{tok.text}"
    return f"{body}@{tok.start}-{tok.end}"


def detokenize(tokens) -> str:
    """Render tokens back to TeX source text."""
    out: List[str] = []
    prev_word = False
    for tok in tokens:
        if tok.kind == CS:
            if tok.text == "par":
                out.append("\n\n")
                prev_word = False
                continue
            out.append("\\" + tok.text)
            prev_word = tok.text[:1].isalpha()
            continue
        if tok.kind == PARAM:
            out.append("#" + tok.text)
        elif tok.kind == MARKER:
            out.append("\\" + tok.text if not isinstance(tok.data, str) else tok.data)
        else:
            if prev_word and tok.text.isalpha():
                out.append(" ")
            out.append(tok.text)
        prev_word = False
    return "".join(out)


# -- scanning kernels --------------------------------------------------------

STATE_NEW_LINE = 0
STATE_MID_LINE = 1
STATE_SKIP_BLANKS = 2

_K_CHAR = 0
_K_CS = 1
_K_PAR = 2
_K_CONTROL_SPACE = 3


@_accel.kernel
def _decode_hats(codes, cats, out_codes, out_src):
    # ^^xy (lowercase hex) and ^^c (c +/- 64) reductions; out_src maps every
    # decoded position back to its source offset, with a trailing sentinel.
    n = codes.shape[0]
    i = 0
    m = 0
    while i < n:
        c = codes[i]
        if cats[c] == 7 and i + 2 < n and codes[i + 1] == c:
            d = codes[i + 2]
            if i + 3 < n:
                e = codes[i + 3]
                dh = (48 <= d <= 57) or (97 <= d <= 102)
                eh = (48 <= e <= 57) or (97 <= e <= 102)
                if dh and eh:
                    hi = d - 48 if d <= 57 else d - 87
                    lo = e - 48 if e <= 57 else e - 87
                    out_codes[m] = hi * 16 + lo
                    out_src[m] = i
                    m += 1
                    i += 4
                    continue
            if d < 128:
                out_codes[m] = d + 64 if d < 64 else d - 64
                out_src[m] = i
                m += 1
                i += 3
                continue
        out_codes[m] = c
        out_src[m] = i
        m += 1
        i += 1
    out_src[m] = n
    return m


@_accel.kernel
def _scan(codes, n, cats, state, kind, start, end, a, b, bad):
    # TeX's reading state machine (new-line / mid-line / skip-blanks) over
    # decoded code points.  Emits token records into the preallocated output
    # arrays; returns (token count, invalid-char count, final state).
    i = 0
    t = 0
    nb = 0
    while i < n:
        c = codes[i]
        cat = cats[c]
        if cat == 0:
            j = i + 1
            if j >= n:
                kind[t] = 1
                start[t] = i
                end[t] = j
                a[t] = j
                b[t] = j
                t += 1
                i = j
                state = 2
                continue
            c2 = codes[j]
            cat2 = cats[c2]
            if cat2 == 11:
                k = j
                while k < n and cats[codes[k]] == 11:
                    k += 1
                kind[t] = 1
                start[t] = i
                end[t] = k
                a[t] = j
                b[t] = k
                t += 1
                i = k
                state = 2
            elif cat2 == 5:
                k = j + 1
                if c2 == 13 and k < n and codes[k] == 10:
                    k += 1
                kind[t] = 3
                start[t] = i
                end[t] = k
                a[t] = j
                b[t] = j + 1
                t += 1
                i = k
                state = 0
            else:
                kind[t] = 1
                start[t] = i
                end[t] = j + 1
                a[t] = j
                b[t] = j + 1
                t += 1
                i = j + 1
                state = 2 if cat2 == 10 else 1
            continue
        if cat == 5:
            k = i + 1
            if c == 13 and k < n and codes[k] == 10:
                k += 1
            if state == 0:
                kind[t] = 2
                start[t] = i
                end[t] = k
                t += 1
            elif state == 1:
                kind[t] = 0
                start[t] = i
                end[t] = k
                a[t] = 32
                b[t] = 10
                t += 1
            state = 0
            i = k
            continue
        if cat == 10:
            if state == 1:
                kind[t] = 0
                start[t] = i
                end[t] = i + 1
                a[t] = 32
                b[t] = 10
                t += 1
                state = 2
            i += 1
            continue
        if cat == 14:
            k = i + 1
            while k < n and codes[k] != 10 and codes[k] != 13:
                k += 1
            if k < n:
                c3 = codes[k]
                k += 1
                if c3 == 13 and k < n and codes[k] == 10:
                    k += 1
                state = 0
            i = k
            continue
        if cat == 9:
            i += 1
            continue
        if cat == 15:
            bad[nb] = i
            nb += 1
            i += 1
            continue
        kind[t] = 0
        start[t] = i
        end[t] = i + 1
        a[t] = c
        b[t] = cat
        t += 1
        state = 1
        i += 1
    return t, nb, state


def _codes_of(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-32-le"), dtype="<u4").astype(np.int32)


def scan_arrays(text: str, cats: np.ndarray, state: int = STATE_NEW_LINE, scan=None, decode=None):
    """Run both kernels; returns raw token records plus the decoded buffer."""
    scan = scan or _scan
    decode = decode or _decode_hats
    codes = _codes_of(text)
    n = codes.shape[0]
    dec = np.empty(n, dtype=np.int32)
    src = np.empty(n + 1, dtype=np.int64)
    m = decode(codes, cats, dec, src)
    kind = np.empty(m + 1, dtype=np.int8)
    start = np.empty(m + 1, dtype=np.int64)
    end = np.empty(m + 1, dtype=np.int64)
    a = np.zeros(m + 1, dtype=np.int64)  # unused slots stay defined
    b = np.zeros(m + 1, dtype=np.int64)
    bad = np.empty(m + 1, dtype=np.int64)
    t, nb, final = scan(dec, m, cats, state, kind, start, end, a, b, bad)
    return dec[:m], src[: m + 1], kind[:t], start[:t], end[:t], a[:t], b[:t], bad[:nb], final


def _records_to_tokens(text: str, offset: int, cats: np.ndarray, state: int):
    dec, src, kind, start, end, a, b, bad, _ = scan_arrays(text, cats, state)
    src_l = src.tolist()
    tokens: List[Token] = []
    append = tokens.append
    dec_l = None
    for k, s, e, x, y in zip(kind.tolist(), start.tolist(), end.tolist(), a.tolist(), b.tolist()):
        s0 = src_l[s] + offset
        e0 = src_l[e] + offset
        if k == _K_CHAR:
            append(Token(CHAR, chr(x), y, s0, e0))
        elif k == _K_CS:
            if y - x == 1:
                name = chr(int(dec[x]))
            else:
                if dec_l is None:
                    dec_l = dec
                name = dec_l[x:y].astype("<u4").tobytes().decode("utf-32-le")
            append(Token(CS, name, 0, s0, e0))
        elif k == _K_PAR:
            append(Token(CS, "par", 0, s0, e0))
        else:
            append(Token(CS, " ", 0, s0, e0))
    bad_spans = [(src_l[i] + offset, src_l[i + 1] + offset) for i in bad.tolist()]
    return tokens, bad_spans


class Lexer:
    """Incremental token source over one input text.

    Scanning is eager from the current position; changing the catcode table
    or jumping to an offset rescans the remainder.
    """

    def __init__(self, text: str, table: Optional[CatcodeTable] = None, offset: int = 0):
        self.text = text
        self.table = table if table is not None else default_catcodes()
        self.diagnostics: List[Diagnostic] = []
        self._tokens: List[Token] = []
        self._i = 0
        self._scan_from(offset, STATE_NEW_LINE)

    def _scan_from(self, offset: int, state: int) -> None:
        tokens, bad = _records_to_tokens(self.text[offset:], offset, self.table.array, state)
        self._tokens = tokens
        self._i = 0
        self._base = offset
        known = {d.span for d in self.diagnostics}
        for span in bad:
            if span not in known:
                ch = self.text[span[0]:span[1]]
                self.diagnostics.append(error(
                    InvalidCharacter.code, f"invalid character {ch!r} (category 15)", span))

    def __iter__(self) -> Iterator[Token]:
        return self

    def __next__(self) -> Token:
        if self._i >= len(self._tokens):
            raise StopIteration
        tok = self._tokens[self._i]
        self._i += 1
        return tok

    def next_token(self) -> Optional[Token]:
        if self._i >= len(self._tokens):
            return None
        tok = self._tokens[self._i]
        self._i += 1
        return tok

    def peek(self) -> Optional[Token]:
        if self._i >= len(self._tokens):
            return None
        return self._tokens[self._i]

    def at_end(self) -> bool:
        return self._i >= len(self._tokens)

    @property
    def offset(self) -> int:
        """Source offset where the next unread token begins."""
        if self._i < len(self._tokens):
            return self._tokens[self._i].start
        return len(self.text)

    def set_table(self, table: CatcodeTable) -> None:
        """Install a new catcode table and re-lex everything not yet read."""
        nxt = self.peek()
        self.table = table
        if nxt is None:
            return
        state = STATE_NEW_LINE if nxt.is_cs("par") else STATE_MID_LINE
        self._scan_from(nxt.start, state)

    def jump(self, offset: int, state: int = STATE_MID_LINE) -> None:
        """Continue lexing at ``offset``, discarding anything read ahead."""
        self._scan_from(offset, state)


def tokenize(text: str, table: Optional[CatcodeTable] = None) -> List[Token]:
    """Full token stream for ``text``; raises on the first invalid character."""
    lexer = Lexer(text, table)
    for diag in lexer.diagnostics:
        raise InvalidCharacter(diag.message, diag.span)
    return list(lexer._tokens)


def next_expandable(cursor: Lexer, table: Optional[CatcodeTable] = None) -> Token:
    if table is not None and table != cursor.table:
        cursor.set_table(table)
    tok = cursor.next_token()
    if tok is None:
        raise EndOfInput("no more tokens", (len(cursor.text), len(cursor.text)))
    return tok
