"""Build the 50-document sample corpus used by the acceptance tests.

The corpus is fully determined by the seed: 25 clean documents, 15 that
complete with errors because they call unknown macros, and 10 that fail
outright (runaway recursion, undecodable bytes, too many errors, bundles
without a main file).

    python3 scripts/make_sample_corpus.py [output_dir]
"""

from __future__ import annotations

import random
import shutil
import sys
from pathlib import Path

SEED = 20240601
CLEAN, WARNING, FAILING = 25, 15, 10

# Unknown macros with a skewed draw so the ranking has a clear head and ties.
UNKNOWN_POOL = [("vect", 8), ("abs", 6), ("Prob", 5), ("ceil", 4), ("todo", 3),
                ("sfrac", 2), ("mycite", 2), ("half", 1), ("RR", 1), ("dd", 1)]

SENTENCES = [
    "We study a simple model of growth.",
    "The argument is short and uses only elementary facts.",
    "Each step preserves the invariant stated above.",
    "This bound is tight for small inputs.",
    "Related work covers several special cases.",
    "The construction below is standard.",
    "We now turn to the general case.",
    "A careful count gives the claimed estimate.",
    "The proof proceeds by induction on the length.",
    "Numerical experiments agree with the prediction.",
]
INLINE_MATH = [r"x^2 + y^2", r"\alpha + \beta", r"\frac{a}{b}", r"f(x) = e^{-x}", r"n \geq 1",
               r"\sqrt{2}", r"a_i^j", r"\sum_{k=1}^{n} k", r"|x| \leq 1", r"\int_0^1 t\,dt"]
DISPLAY_MATH = [r"E = mc^2", r"\sum_{i=1}^{n} i = \frac{n(n+1)}{2}",
                r"\left( \frac{1}{2} \right)^{n} \to 0", r"\int_{0}^{\infty} e^{-x}\,dx = 1",
                r"\begin{pmatrix} a & b \\ c & d \end{pmatrix}", r"x = \frac{-b \pm \sqrt{b^2-4ac}}{2a}"]


def _paragraph(rng: random.Random) -> str:
    parts = rng.sample(SENTENCES, 3)
    if rng.random() < 0.7:
        parts.insert(1, f"Consider ${rng.choice(INLINE_MATH)}$ here.")
    return " ".join(parts)


def _body(rng: random.Random, extra=()) -> str:
    """Sections with paragraphs, math, lists and theorems; ``extra`` snippets are spliced in."""
    extra = list(extra)
    chunks = [r"\begin{abstract}", _paragraph(rng), r"\end{abstract}"]
    for s in range(rng.randint(2, 3)):
        chunks.append(rf"\section{{Part {s + 1}}}")
        for _ in range(rng.randint(1, 3)):
            p = _paragraph(rng)
            if extra:
                p += " " + extra.pop(0)
            chunks.append(p)
        kind = rng.choice(["equation", "list", "theorem", "none"])
        if kind == "equation":
            eq = [r"\begin{equation}", rf"\label{{eq:{s}}}", rng.choice(DISPLAY_MATH), r"\end{equation}"]
            chunks += ["\n".join(eq), rf"By \eqref{{eq:{s}}} the claim follows."]
        elif kind == "list":
            chunks += [r"\begin{itemize}"] + [rf"\item {rng.choice(SENTENCES)}" for _ in range(3)] + [r"\end{itemize}"]
        elif kind == "theorem":
            chunks += [r"\begin{theorem}", f"For all ${rng.choice(INLINE_MATH)}$ the bound holds.", r"\end{theorem}",
                       r"\begin{proof}", rng.choice(SENTENCES), r"\end{proof}"]
    while extra:
        chunks.append(extra.pop(0))
    return "\n\n".join(chunks)


def _document(title: str, author: str, body: str, preamble: str = "") -> str:
    return (f"\\documentclass{{article}}\n\\usepackage{{amsmath}}\n{preamble}"
            f"\\newtheorem{{theorem}}{{Theorem}}\n\\title{{{title}}}\n\\author{{{author}}}\n"
            f"\\begin{{document}}\n\\maketitle\n\n{body}\n\n\\end{{document}}\n")


def _unknown_calls(rng: random.Random) -> list:
    names = [n for n, _ in UNKNOWN_POOL]
    weights = [w for _, w in UNKNOWN_POOL]
    calls = []
    for _ in range(rng.randint(1, 4)):
        name = rng.choices(names, weights)[0]
        if rng.random() < 0.5:
            calls.append(rf"See $\{name}{{x}}$ again.")
        else:
            calls.append(rf"Marked \{name}{{here}} in text.")
    return calls


def build(out: Path, seed: int = SEED) -> None:
    rng = random.Random(seed)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    authors = ["Ada Byron", "Carl Gauss", "Emmy Noether", "Alan Turing", "Sofia Kovalevskaya"]

    for i in range(1, CLEAN + 1):
        preamble = r"\newcommand{\R}{\mathbb{R}}" + "\n" if i % 3 == 0 else ""
        extra = [r"Every $x \in \R$ is real."] if i % 3 == 0 else []
        text = _document(f"Clean note {i}", rng.choice(authors), _body(rng, extra), preamble)
        if i == 7:  # a bundle whose main file is named by a MAIN marker
            d = out / f"clean-{i:02d}"
            d.mkdir()
            (d / "MAIN").write_text("paper.tex\n", encoding="utf-8")
            (d / "paper.tex").write_text(text, encoding="utf-8")
            (d / "notes.tex").write_text("Scratch notes, not part of the paper.\n", encoding="utf-8")
        else:
            (out / f"clean-{i:02d}.tex").write_text(text, encoding="utf-8")

    for i in range(1, WARNING + 1):
        text = _document(f"Draft {i}", rng.choice(authors), _body(rng, _unknown_calls(rng)))
        (out / f"warn-{i:02d}.tex").write_text(text, encoding="utf-8")

    fail = 0

    def failing(kind: str) -> Path:
        nonlocal fail
        fail += 1
        return out / f"fail-{fail:02d}-{kind}"

    for _ in range(4):
        body = _paragraph(rng) + "\n\n" + r"\def\spin{\spin x}\spin"
        failing("recursion").with_suffix(".tex").write_text(_document("Loop", "A. Loop", body), encoding="utf-8")
    for _ in range(2):
        raw = _document("Bytes", "B. Bytes", _paragraph(rng)).encode("utf-8")
        raw = raw.replace(b"\\maketitle", b"\\maketitle\n\xff\xfe\xc3(")
        failing("encoding").with_suffix(".tex").write_bytes(raw)
    for _ in range(2):
        body = _paragraph(rng) + "\n\n" + "\n".join(r"\item stray" for _ in range(120))
        failing("errors").with_suffix(".tex").write_text(_document("Noise", "C. Noise", body), encoding="utf-8")
    for _ in range(2):
        d = failing("nomain")
        d.mkdir()
        (d / "intro.tex").write_text(_document("Half", "D. Half", _paragraph(rng)), encoding="utf-8")
        (d / "appendix.tex").write_text(_document("Other half", "D. Half", _paragraph(rng)), encoding="utf-8")
    assert fail == FAILING


if __name__ == "__main__":
    build(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "samples")
