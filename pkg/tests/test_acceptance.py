"""Acceptance criteria, one test each, at their stated thresholds.

Run with ``pytest tests/test_acceptance.py``; the terminal summary ends with
one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import filecmp
import html
import json
import random
import re
import time
from collections import Counter
from pathlib import Path

import pytest

from texhtml import harness
from texhtml.fixtures import discover_fixtures, run_suite
from texhtml.harness import FAILED, HarnessConfig, convert_corpus, convert_source
from texhtml.mathgrammar import parse_math
from texhtml.mathml import LITERAL_INTENT, annotation_text, math_in_html
from texhtml.scaffold import page_text
from texhtml.validator import resolve, validate_core

from conftest import FIXTURES, ROOT, SAMPLES
from mathfuzz import random_tokens
from mutations import mutate
from source_oracle import collapse, normalize_source

MUTATION_COUNT = 1000
FUZZ_COUNT = 10_000


def _sources():
    """(name, source) for every fixture and every readable sample document."""
    out = [(f"{f.category}/{f.id}", f.source) for f in discover_fixtures(FIXTURES)]
    for doc_id, path in harness.discover(SAMPLES):
        if path is None:  # bundle without a main file
            continue
        try:
            out.append((f"samples/{doc_id}", harness.read_source(path)))
        except (OSError, UnicodeDecodeError):
            continue
    return out


@pytest.fixture(scope="module")
def converted():
    return [(name, src, convert_source(src, name.replace("/", "_"))) for name, src in _sources()]


@pytest.mark.criterion(1, "validator closure over the corpus and mutation completeness")
def test_validator_closure(converted):
    roots = []
    for name, _, res in converted:
        if res.html is None:
            continue
        for m in math_in_html(res.html):
            assert validate_core(m) == [], name
            roots.append(m)
        for rec in res.math:
            assert validate_core(rec.element) == [], name
    assert len(roots) >= 200
    rng = random.Random(1234)
    for _ in range(MUTATION_COUNT):
        tree, desc = mutate(rng.choice(roots), rng)
        violations = validate_core(tree)
        assert violations, f"undetected mutation: {desc}"
        for v in violations:
            resolve(tree, v.path)


@pytest.mark.criterion(2, "every math root has intent=:literal and a byte-exact annotation")
def test_intent_and_annotation(converted):
    checked = 0
    for name, src, res in converted:
        if res.html is None:
            continue
        roots = math_in_html(res.html)
        assert len(roots) == len(res.math), name
        for m in roots:
            assert m.attrs.get("intent") == LITERAL_INTENT, name
        slices = []
        for rec in res.math:
            assert rec.span is not None, name
            a, b = rec.span
            assert rec.tex.encode("utf-8") == src[a:b].encode("utf-8"), (name, rec.tex, src[a:b])
            slices.append(src[a:b].encode("utf-8"))
        assert sorted(annotation_text(m).encode("utf-8") for m in roots) == sorted(slices), name
        checked += len(roots)
    assert checked >= 200


@pytest.mark.criterion(3, "content preservation on subset-clean and fallback fixtures")
def test_content_preservation(converted):
    clean = 0
    for name, src, res in converted:
        want = normalize_source(src)
        if want is None or res.html is None:
            continue
        assert collapse(page_text(res.html)) == want, name
        clean += 1
    assert clean >= 60

    blobs = 0
    for f in discover_fixtures(FIXTURES, "fallback"):
        src = f.source
        res = convert_source(src, f.id)
        page = {collapse(html.unescape(t))
                for t in re.findall(r'class="fallback"[^>]*>(.*?)</(?:pre|code)>', res.html or "", flags=re.S)}
        for n in _iter_nodes(res.tree):
            if n.kind != "fallback-blob":
                continue
            assert n.verbatim_span is not None, f.id
            a, b = n.verbatim_span
            assert n.verbatim.encode("utf-8") == src[a:b].encode("utf-8"), f.id
            assert collapse(n.verbatim) in page, f.id
            blobs += 1
    assert blobs >= 10


def _iter_nodes(node):
    if node is None:
        return
    yield node
    for c in node.children:
        yield from _iter_nodes(c)


def _recount(out: Path):
    reports = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
    blocking = {"error", "fatal"}
    clean = sum(1 for r in reports if not any(d["severity"] in blocking for d in r["diagnostics"]))
    pages = len(list(out.glob("*.html")))
    return len(reports), pages, clean, reports


@pytest.mark.criterion(4, "sample corpus reports availability 40/50 and error-free 25/50")
def test_metric_definitions(tmp_path):
    out = tmp_path / "out"
    convert_corpus(SAMPLES, HarnessConfig(workers=1), out)
    summary = json.loads((out / "summary.json").read_text())
    n, pages, clean, reports = _recount(out)
    assert n == 50 and pages == 40 and clean == 25
    assert summary["html_availability_rate"] == 40 / 50 == pages / n
    assert summary["error_free_rate"] == 25 / 50 == clean / n
    by_prefix = Counter((r["id"].split("-")[0], r["status"]) for r in reports)
    assert by_prefix == Counter({("clean", "error-free"): 25, ("warn", "completed-with-errors"): 15,
                                 ("fail", FAILED): 10})


def _brute_force_tally(corpus: Path):
    manifest = {ln for ln in (ROOT / "src/texhtml/data/bindings.txt").read_text(encoding="utf-8").splitlines()
                if ln and not ln.startswith("#")}
    define = re.compile(r"\\(?:def|gdef|edef|newcommand\*?\{?|renewcommand\*?\{?|providecommand\*?\{?|"
                        r"DeclareMathOperator\*?\{?)\\([A-Za-z]+)")
    docs, occ = Counter(), Counter()
    for entry in sorted(corpus.iterdir()):
        files = [entry] if entry.suffix == ".tex" else sorted(entry.glob("*.tex"))
        text = "\n".join(strip_comments(f.read_bytes().decode("utf-8", errors="replace")) for f in files)
        defined = set(define.findall(text))
        names = [n for n in re.findall(r"\\([A-Za-z]+)", text)
                 if f"\\{n}" not in manifest and n not in defined]
        for name, count in Counter(names).items():
            docs[name] += 1
            occ[name] += count
    return sorted(((n, docs[n], occ[n]) for n in docs), key=lambda t: (-t[1], -t[2], t[0]))


def strip_comments(text: str) -> str:
    return re.sub(r"(?<!\\)%[^\n]*", "", text)


@pytest.mark.criterion(5, "missing-macro ranking equals an independent brute-force tally")
def test_frequency_signal(tmp_path):
    out = tmp_path / "out"
    report = convert_corpus(SAMPLES, HarnessConfig(), out)
    expected = _brute_force_tally(SAMPLES)
    assert len(expected) >= 5
    got = [(m.name, m.documents, m.occurrences) for m in harness.rank_missing_macros(report)]
    assert got == expected
    lines = [tuple(ln.split("\t")) for ln in (out / "ranking.txt").read_text().splitlines()]
    assert lines == [(n, str(d), str(o)) for n, d, o in expected]


@pytest.mark.criterion(6, "golden suite (>=120 fixtures) passes and the math fuzz never aborts")
def test_suite_health():
    results = run_suite(FIXTURES)
    assert len(results) >= 120
    failing = [f"{r.fixture.category}/{r.fixture.id}" for r in results if not r.passed]
    assert failing == []
    rng = random.Random(99)
    for k in range(FUZZ_COUNT):
        tokens = random_tokens(rng)
        try:
            expr, diags = parse_math(tokens, rng.random() < 0.5)
        except Exception as exc:  # noqa: BLE001 - any escape is a totality failure
            pytest.fail(f"parse_math raised on input {k}: {exc!r}")
        assert expr is not None
        assert "math-parse-failure" not in [d.code for d in diags], k


@pytest.mark.criterion(7, "runs at different worker widths are byte-identical")
def test_determinism(tmp_path):
    a = convert_corpus(SAMPLES, HarnessConfig(workers=1), tmp_path / "a")
    b = convert_corpus(SAMPLES, HarnessConfig(workers=4), tmp_path / "b")
    pages_a = sorted(p.name for p in (tmp_path / "a").glob("*.html"))
    pages_b = sorted(p.name for p in (tmp_path / "b").glob("*.html"))
    assert pages_a == pages_b and len(pages_a) == 40
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b",
                                               pages_a + ["ranking.txt", "texhtml.css"], shallow=False)
    assert mismatch == [] and errors == []
    assert a.aggregates() == b.aggregates()
    strip = lambda rep: [r.to_json(timings=False) for r in rep.documents]  # noqa: E731
    assert strip(a) == strip(b)


@pytest.mark.criterion(8, "bench mode reports throughput and stage medians in under 10 s")
def test_throughput():
    t0 = time.perf_counter()
    summary = harness.benchmark(SAMPLES, repetitions=3)
    elapsed = time.perf_counter() - t0
    assert summary.documents == 50
    assert summary.median_docs_per_second > 0
    assert set(summary.stage_medians_ms) == set(harness.STAGES)
    assert all(v >= 0 for v in summary.stage_medians_ms.values())
    assert max(summary.wall_times) < 10.0
    assert elapsed < 10.0
    print(f"\nbench: {summary.median_docs_per_second:.1f} docs/s, "
          f"stages {json.dumps(summary.stage_medians_ms)}, {elapsed:.2f} s total")


def test_checked_in_samples_match_generator(sample_corpus):
    """The committed sample corpus is exactly what the generator produces."""
    def files(root):
        return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())

    assert files(SAMPLES) == files(sample_corpus)
    for rel in files(SAMPLES):
        assert (SAMPLES / rel).read_bytes() == (sample_corpus / rel).read_bytes(), rel
