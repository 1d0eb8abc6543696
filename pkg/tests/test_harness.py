from __future__ import annotations

import json
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texhtml import harness
from texhtml.diagnostics import Diagnostic, DuplicateDocumentId, Severity
from texhtml.harness import (ERROR_FREE, FAILED, WITH_ERRORS, ConversionReport, CorpusReport, HarnessConfig,
                             MacroFrequency, convert_corpus, convert_source, merge_reports,
                             rank_missing_macros, status_of)
from texhtml.macros import MissingMacroRecord

from conftest import wrap


def report(doc_id, status=ERROR_FREE, missing=()):
    diags = {ERROR_FREE: [], WITH_ERRORS: [Diagnostic(Severity.ERROR, "x", "x")],
             FAILED: [Diagnostic(Severity.FATAL, "y", "y")]}[status]
    return ConversionReport(doc_id, status, diags, [MissingMacroRecord(n, c, None) for n, c in missing],
                            output_path=None if status == FAILED else f"{doc_id}.html")


def test_status_of():
    assert status_of([]) == ERROR_FREE
    assert status_of([Diagnostic(Severity.WARNING, "w", "w")]) == ERROR_FREE
    assert status_of([Diagnostic(Severity.ERROR, "e", "e")]) == WITH_ERRORS


def test_error_document_still_produces_html():
    res = convert_source(wrap(r"\unknowncmd"))
    assert res.report.status == WITH_ERRORS and res.html is not None
    assert [m.name for m in res.report.missing_macros] == ["unknowncmd"]


def test_stopping_condition_fails_without_html():
    res = convert_source(wrap(r"\def\a{\a}\a"))
    assert res.report.status == FAILED and res.html is None
    assert any(d.severity == Severity.FATAL for d in res.report.diagnostics)


def test_too_many_errors_fails():
    res = convert_source(wrap("\n".join([r"\item x"] * 101)))
    assert res.report.status == FAILED
    assert "too-many-errors" in [d.code for d in res.report.diagnostics]


def test_timeout_fails(monkeypatch):
    res = convert_source(wrap("x"), config=HarnessConfig(timeout=-1.0))
    assert res.report.status == FAILED


def test_report_json_round_trip():
    r = convert_source(wrap(r"\foo $x$"), "d").report
    assert ConversionReport.from_json(r.to_json()).to_json() == r.to_json()
    assert "timings_ms" not in r.to_json(timings=False)


def test_rates_and_empty_corpus():
    rep = CorpusReport([report("a"), report("b", WITH_ERRORS), report("c", FAILED), report("d")])
    assert rep.html_availability_rate == 3 / 4
    assert rep.error_free_rate == 2 / 4
    empty = CorpusReport([])
    assert empty.html_availability_rate == 1.0 and empty.error_free_rate == 1.0
    assert [w.code for w in empty.warnings] == ["empty-corpus"]


def test_ranking_order():
    rep = CorpusReport([report("a", WITH_ERRORS, [("x", 1), ("y", 5)]),
                        report("b", WITH_ERRORS, [("x", 1), ("z", 2)]),
                        report("c", WITH_ERRORS, [("w", 2)])])
    assert rank_missing_macros(rep) == [MacroFrequency("x", 2, 2), MacroFrequency("y", 1, 5),
                                        MacroFrequency("w", 1, 2), MacroFrequency("z", 1, 2)]
    assert [m.name for m in rank_missing_macros(rep, k=2)] == ["x", "y"]


def test_merge_rejects_duplicate_ids():
    with pytest.raises(DuplicateDocumentId):
        merge_reports(CorpusReport([report("a")]), CorpusReport([report("a")]))


def test_feedback_weights_ranking(tmp_path):
    csv = tmp_path / "fb.csv"
    csv.write_text("doc,reports\nb,5\na,1\n", encoding="utf-8")
    fb = harness.load_feedback(csv)
    rep = CorpusReport([report("a", WITH_ERRORS, [("x", 1)]), report("b", WITH_ERRORS, [("y", 1)]),
                        report("c", WITH_ERRORS, [("x", 1)])], feedback=fb)
    assert [m["name"] for m in harness.feedback_ranking(rep)] == ["y", "x"]
    assert [m.name for m in rank_missing_macros(rep)] == ["x", "y"]


NAMES = st.sampled_from(["p", "q", "r", "s"])
REPORTS = st.builds(lambda i, status, missing: report(f"d{i}", status, missing),
                    st.integers(0, 10**6), st.sampled_from([ERROR_FREE, WITH_ERRORS, FAILED]),
                    st.lists(st.tuples(NAMES, st.integers(1, 5)), max_size=3, unique_by=lambda t: t[0]))


def _disjoint(lists):
    seen, out = set(), []
    for part in lists:
        keep = [r for r in part if r.doc_id not in seen]
        seen.update(r.doc_id for r in keep)
        out.append(CorpusReport(keep, 1.0))
    return out


@settings(max_examples=200)
@given(st.lists(st.lists(REPORTS, max_size=6), min_size=3, max_size=3))
def test_merge_is_associative_and_commutative(parts):
    a, b, c = _disjoint(parts)
    agg = lambda r: r.aggregates()  # noqa: E731
    assert agg(merge_reports(a, b)) == agg(merge_reports(b, a))
    assert agg(merge_reports(merge_reports(a, b), c)) == agg(merge_reports(a, merge_reports(b, c)))


@settings(max_examples=200)
@given(st.lists(REPORTS, max_size=12))
def test_status_algebra_brute_force(reports):
    (rep,) = _disjoint([reports])
    clean = sum(1 for r in rep.documents if not any(d.severity.blocking for d in r.diagnostics))
    html = sum(1 for r in rep.documents if r.status != FAILED)
    n = max(rep.size, 1)
    assert rep.error_free_rate == (clean / n if rep.size else 1.0)
    assert rep.html_availability_rate == (html / n if rep.size else 1.0)


def test_discover_bundles(tmp_path):
    (tmp_path / "single.tex").write_text(wrap("x"), encoding="utf-8")
    b = tmp_path / "bundle"
    b.mkdir()
    (b / "MAIN").write_text("paper.tex", encoding="utf-8")
    (b / "paper.tex").write_text(wrap("y"), encoding="utf-8")
    (b / "other.tex").write_text(wrap("z"), encoding="utf-8")
    c = tmp_path / "ambiguous"
    c.mkdir()
    (c / "one.tex").write_text("", encoding="utf-8")
    (c / "two.tex").write_text("", encoding="utf-8")
    found = dict(harness.discover(tmp_path))
    assert found["bundle"].name == "paper.tex"
    assert found["ambiguous"] is None
    assert found["single"].name == "single.tex"


def _stable(report):
    return [r.to_json(timings=False) for r in report.documents]


def test_isolation_one_bad_document(sample_corpus, tmp_path):
    corpus = tmp_path / "c"
    shutil.copytree(sample_corpus, corpus)
    before = _stable(convert_corpus(corpus))
    (corpus / "zz-crash.tex").write_bytes(b"\\documentclass{article}\n\\begin{document}\n\xff\n")
    after = _stable(convert_corpus(corpus))
    assert len(after) == len(before) + 1
    assert [r for r in after if r["id"] != "zz-crash"] == before
    assert next(r for r in after if r["id"] == "zz-crash")["status"] == FAILED


def test_outputs_written(sample_corpus, tmp_path):
    out = tmp_path / "out"
    rep = convert_corpus(sample_corpus, output_dir=out)
    assert (out / "texhtml.css").is_file()
    assert sorted(p.stem for p in out.glob("*.html")) == sorted(r.doc_id for r in rep.documents
                                                                 if r.status != FAILED)
    assert len(harness.read_reports(out / "report.jsonl")) == 50
    summary = json.loads((out / "summary.json").read_text())
    assert summary["documents"] == 50 and summary["documents_per_second"] > 0
    ranking = (out / "ranking.txt").read_text().splitlines()
    assert ranking[0].split("\t")[0] == rank_missing_macros(rep)[0].name


def test_parallel_matches_sequential(sample_corpus, tmp_path):
    seq = convert_corpus(sample_corpus, HarnessConfig(workers=1), tmp_path / "a")
    par = convert_corpus(sample_corpus, HarnessConfig(workers=3), tmp_path / "b")
    assert seq.aggregates() == par.aggregates()
    assert _stable(seq) == _stable(par)


def test_benchmark_reports_stage_medians(sample_corpus):
    summary = harness.benchmark(sample_corpus, repetitions=1)
    assert summary.documents == 50
    assert set(summary.stage_medians_ms) == set(harness.STAGES)
    assert summary.median_docs_per_second > 0
