"""Random math token lists for totality fuzzing."""

from __future__ import annotations

import random
from typing import List

from texhtml.macros import MarkerInfo
from texhtml.tokenizer import CHAR, CS, MARKER, PARAM, Catcode, Token

CHARS = ([(c, Catcode.LETTER) for c in "abxyzAB"] + [(c, Catcode.OTHER) for c in "0123.+-=<>()[]|,'!/*:;"]
         + [("^", Catcode.SUPERSCRIPT), ("_", Catcode.SUBSCRIPT), ("&", Catcode.ALIGNMENT),
            ("{", Catcode.BEGIN_GROUP), ("}", Catcode.END_GROUP), (" ", Catcode.SPACE),
            ("~", Catcode.ACTIVE), ("$", Catcode.MATH_SHIFT), ("#", Catcode.PARAMETER)])
NAMES = ["frac", "dfrac", "binom", "sqrt", "left", "right", "middle", "sum", "int", "lim", "prod", "hat",
         "overline", "underbrace", "overset", "text", "mathrm", "mathbb", "operatorname", "begin", "end",
         "\\", "alpha", "infty", "cdot", "leq", "big", "Bigl", "over", "choose", "phantom", "hspace", "quad",
         ",", "substack", "stackrel", "displaystyle", "label", "tag", "nonumber", "mathop", "limits",
         "nolimits", "unknowncs", "{", "}", "|", "langle", "rangle", "par", "cr", "hline", "prime"]
ENVS = ["matrix", "pmatrix", "cases", "array", "aligned", "bogus"]


def random_token(rng: random.Random, pos: int) -> Token:
    r = rng.random()
    if r < 0.55:
        ch, cat = rng.choice(CHARS)
        return Token(CHAR, ch, int(cat), pos, pos + 1)
    if r < 0.93:
        return Token(CS, rng.choice(NAMES), 0, pos, pos + 1)
    if r < 0.97:
        return Token(PARAM, str(rng.randint(1, 9)), int(Catcode.PARAMETER), pos, pos + 1)
    return Token(MARKER, "mystery", 0, pos, pos + 1, MarkerInfo("undefined"))


def random_tokens(rng: random.Random, max_len: int = 40) -> List[Token]:
    out: List[Token] = []
    for pos in range(rng.randint(0, max_len)):
        if out and out[-1].is_cs("begin") or out and out[-1].is_cs("end"):
            if rng.random() < 0.8:
                env = rng.choice(ENVS)
                out += [Token(CHAR, "{", int(Catcode.BEGIN_GROUP), pos, pos + 1)]
                out += [Token(CHAR, c, int(Catcode.LETTER), pos, pos + 1) for c in env]
                out += [Token(CHAR, "}", int(Catcode.END_GROUP), pos, pos + 1)]
                continue
        out.append(random_token(rng, pos))
    return out
