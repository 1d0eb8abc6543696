"""Single-document pipeline and batch corpus runs with health metrics."""

from __future__ import annotations

import csv
import json
import os
import shlex
import statistics
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import __version__, macros
from .diagnostics import (
    ConversionError, ConversionTimeout, Diagnostic, DuplicateDocumentId, InputDirUnreadable,
    Severity, Span, TooManyErrors, warning,
)
from .docmodel import DocNode, Frontmatter, build_document, extract_frontmatter, math_leaves
from .macros import Expander, MissingMacroRecord
from .mathgrammar import parse_math
from .mathml import MathMLNode, emit_math, serialize
from .scaffold import PageConfig, assemble_page, default_theme
from .tokenizer import Lexer

REPORT_SCHEMA = 1
SUMMARY_SCHEMA = 1
STAGES = ("tokenize", "expand", "model", "math", "emit")
ERROR_FREE = "error-free"
WITH_ERRORS = "completed-with-errors"
FAILED = "failed"
MAIN_MARKER = "MAIN"
THEME_FILE = "texhtml.css"


@dataclass
class HarnessConfig:
    workers: int = 1
    timeout: float = 60.0
    max_errors: int = 100
    theme_ref: str = THEME_FILE
    services_ref: Optional[str] = None
    math_mode: str = "embedded"
    today: str = ""

    def page(self) -> PageConfig:
        return PageConfig(theme_ref=self.theme_ref, services_ref=self.services_ref, today=self.today)


@dataclass
class ConversionReport:
    doc_id: str
    status: str
    diagnostics: List[Diagnostic] = field(default_factory=list)
    missing_macros: List[MissingMacroRecord] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    output_path: Optional[str] = None

    @property
    def produced_html(self) -> bool:
        return self.status != FAILED

    def to_json(self, *, timings: bool = True) -> dict:
        data = {
            "schema": REPORT_SCHEMA,
            "id": self.doc_id,
            "status": self.status,
            "diagnostics": [d.to_json() for d in self.diagnostics],
            "missing_macros": [m.to_json() for m in self.missing_macros],
            "output": self.output_path,
        }
        if timings:
            data["timings_ms"] = dict(self.timings)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ConversionReport":
        missing = [MissingMacroRecord(m["name"], m["count"],
                                      tuple(m["first_span"]) if m.get("first_span") else None)
                   for m in data.get("missing_macros", [])]
        return cls(data["id"], data["status"], [Diagnostic.from_json(d) for d in data.get("diagnostics", [])],
                   missing, dict(data.get("timings_ms", {})), data.get("output"))


@dataclass
class MathRecord:
    index: int
    display: bool
    span: Optional[Span]
    tex: str
    element: MathMLNode


@dataclass
class ConversionResult:
    report: ConversionReport
    html: Optional[str] = None
    tree: Optional[DocNode] = None
    frontmatter: Optional[Frontmatter] = None
    math: List[MathRecord] = field(default_factory=list)


@dataclass(frozen=True)
class MacroFrequency:
    name: str
    documents: int
    occurrences: int

    def to_json(self) -> dict:
        return {"name": self.name, "documents": self.documents, "occurrences": self.occurrences}


def status_of(diagnostics: Iterable[Diagnostic]) -> str:
    return WITH_ERRORS if any(d.severity.blocking for d in diagnostics) else ERROR_FREE


def _sort_diags(diags: Iterable[Diagnostic]) -> List[Diagnostic]:
    return sorted(diags, key=lambda d: ((d.span or (-1, -1)), d.code, d.message))


def _check(deadline: float) -> None:
    if time.perf_counter() > deadline:
        raise ConversionTimeout("per-document time limit exceeded")


def convert_source(source: str, doc_id: str = "document",
                   config: Optional[HarnessConfig] = None) -> ConversionResult:
    """Run the full pipeline on one source text.

    Never raises for document problems: a stopping condition yields a
    ``failed`` report with a fatal diagnostic and no HTML.
    """
    config = config or HarnessConfig()
    timings = {s: 0.0 for s in STAGES}
    diags: List[Diagnostic] = []
    start = time.perf_counter()
    deadline = start + config.timeout
    exp: Optional[Expander] = None
    lexer: Optional[Lexer] = None

    def lap(stage: str, t0: float) -> float:
        now = time.perf_counter()
        timings[stage] += (now - t0) * 1000.0
        return now

    def done(status: str, html: Optional[str] = None, **extra) -> ConversionResult:
        timings["total"] = (time.perf_counter() - start) * 1000.0
        missing = sorted(exp.missing.values(), key=lambda m: m.name) if exp is not None else []
        early = (lexer.diagnostics if lexer is not None else []) + (exp.diagnostics if exp is not None else [])
        report = ConversionReport(doc_id, status, _sort_diags(early + diags), missing,
                                  {k: round(v, 3) for k, v in timings.items()},
                                  f"{doc_id}.html" if html is not None else None)
        return ConversionResult(report, html, **extra)

    try:
        t = time.perf_counter()
        state = macros.builtin_bindings()
        lexer = Lexer(source, state.catcodes)
        t = lap("tokenize", t)
        exp = Expander(state, lexer=lexer, deadline=deadline)
        exp.run()
        t = lap("expand", t)
        _check(deadline)
        tree, model_diags = build_document(exp.out, source, theorems=macros.theorem_environments(state))
        front = extract_frontmatter(tree)
        diags.extend(model_diags)
        diags.extend(front.diagnostics)
        t = lap("model", t)
        _check(deadline)
        parsed = []
        for leaf in math_leaves(tree):
            display = leaf.attrs.get("display") == "block"
            expr, math_diags = parse_math(list(leaf.tokens), display)
            diags.extend(math_diags)
            parsed.append((leaf, display, expr))
        t = lap("math", t)
        _check(deadline)
        records: List[MathRecord] = []
        markup: Dict[int, str] = {}
        xmlns = config.math_mode == "standalone-xml"
        for leaf, display, expr in parsed:
            el = emit_math(expr, leaf.verbatim or "", display)
            idx = int(leaf.attrs["index"])  # type: ignore[arg-type]
            markup[idx] = serialize(el, xmlns=xmlns)
            records.append(MathRecord(idx, display, leaf.verbatim_span, leaf.verbatim or "", el))
        page = assemble_page(tree, front, config.page(), markup)
        diags.extend(page.diagnostics)
        lap("emit", t)
        blocking = sum(1 for d in lexer.diagnostics + exp.diagnostics + diags if d.severity.blocking)
        if blocking > config.max_errors:
            raise TooManyErrors(f"{blocking} errors (limit {config.max_errors})")
        return done(status_of(lexer.diagnostics + exp.diagnostics + diags), page.markup,
                    tree=tree, frontmatter=front, math=records)
    except ConversionError as exc:
        diags.append(exc.diagnostic())
    except RecursionError:
        diags.append(Diagnostic(Severity.FATAL, "recursion-limit", "nesting too deep for the converter"))
    except Exception as exc:  # noqa: BLE001 - isolation: any crash fails only this document
        diags.append(Diagnostic(Severity.FATAL, "internal-error", f"{type(exc).__name__}: {exc}"))
    return done(FAILED)


def read_source(path: Path) -> str:
    """Decode a source file as UTF-8 (a BOM is dropped)."""
    return path.read_bytes().decode("utf-8-sig")


def _main_file(directory: Path) -> Optional[Path]:
    marker = directory / MAIN_MARKER
    if marker.is_file():
        name = marker.read_text(encoding="utf-8").strip()
        return directory / name if name else None
    if (directory / "main.tex").is_file():
        return directory / "main.tex"
    tex = sorted(directory.glob("*.tex"))
    return tex[0] if len(tex) == 1 else None


def discover(input_dir: Path) -> List[Tuple[str, Optional[Path]]]:
    """(document id, main file) pairs, sorted by id; the file is None for a bundle without a main file."""
    try:
        entries = sorted(Path(input_dir).iterdir())
    except OSError as exc:
        raise InputDirUnreadable(f"cannot read input directory {input_dir}: {exc}") from exc
    docs: Dict[str, Optional[Path]] = {}
    for entry in entries:
        if entry.is_file() and entry.suffix == ".tex":
            docs[entry.stem] = entry
        elif entry.is_dir() and not entry.name.startswith("."):
            docs[entry.name] = _main_file(entry)
    return sorted(docs.items())


def convert_document(doc_id: str, path: Optional[Path], config: Optional[HarnessConfig] = None) -> ConversionResult:
    config = config or HarnessConfig()
    if path is None:
        return ConversionResult(ConversionReport(doc_id, FAILED, [Diagnostic(
            Severity.FATAL, "no-main-file", "bundle has no declared or unique main file")],
            timings={**{s: 0.0 for s in STAGES}, "total": 0.0}))
    try:
        source = read_source(path)
    except (OSError, UnicodeDecodeError) as exc:
        return ConversionResult(ConversionReport(doc_id, FAILED, [Diagnostic(
            Severity.FATAL, "unreadable-source", f"{type(exc).__name__}: {exc}")],
            timings={**{s: 0.0 for s in STAGES}, "total": 0.0}))
    return convert_source(source, doc_id, config)


def _job(args) -> Tuple[ConversionReport, Optional[str]]:
    doc_id, path, config = args
    result = convert_document(doc_id, path, config)
    return result.report, result.html


@dataclass
class CorpusReport:
    documents: List[ConversionReport] = field(default_factory=list)
    wall_time: float = 0.0
    feedback: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.documents = sorted(self.documents, key=lambda r: r.doc_id)

    @property
    def size(self) -> int:
        return len(self.documents)

    @property
    def html_availability_rate(self) -> float:
        if not self.documents:
            return 1.0
        return sum(1 for r in self.documents if r.produced_html) / self.size

    @property
    def error_free_rate(self) -> float:
        if not self.documents:
            return 1.0
        return sum(1 for r in self.documents if r.status == ERROR_FREE) / self.size

    @property
    def documents_per_second(self) -> float:
        return self.size / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def warnings(self) -> List[Diagnostic]:
        if not self.documents:
            return [warning("empty-corpus", "corpus has no documents; rates are 1.0 by convention")]
        return []

    def macro_frequency(self) -> Dict[str, MacroFrequency]:
        docs: Dict[str, int] = {}
        occ: Dict[str, int] = {}
        for r in self.documents:
            for m in r.missing_macros:
                docs[m.name] = docs.get(m.name, 0) + 1
                occ[m.name] = occ.get(m.name, 0) + m.count
        return {n: MacroFrequency(n, docs[n], occ[n]) for n in sorted(docs)}

    def counts(self) -> Dict[str, int]:
        out = {ERROR_FREE: 0, WITH_ERRORS: 0, FAILED: 0}
        for r in self.documents:
            out[r.status] += 1
        return out

    def aggregates(self) -> dict:
        """Everything in the summary that does not depend on timing."""
        counts = self.counts()
        data = {
            "schema": SUMMARY_SCHEMA,
            "generator": f"texhtml {__version__}",
            "documents": self.size,
            "error_free": counts[ERROR_FREE],
            "completed_with_errors": counts[WITH_ERRORS],
            "failed": counts[FAILED],
            "html_availability_rate": self.html_availability_rate,
            "error_free_rate": self.error_free_rate,
            "missing_macros": [m.to_json() for m in rank_missing_macros(self)],
            "warnings": [d.to_json() for d in self.warnings],
        }
        if self.feedback:
            data["feedback"] = feedback_ranking(self)
        return data

    def summary(self) -> dict:
        data = self.aggregates()
        data["wall_time_s"] = round(self.wall_time, 6)
        data["documents_per_second"] = round(self.documents_per_second, 3)
        return data


def rank_missing_macros(report: CorpusReport, k: Optional[int] = None) -> List[MacroFrequency]:
    """Most widespread missing macros first; ties go to more occurrences, then name."""
    ranked = sorted(report.macro_frequency().values(), key=lambda m: (-m.documents, -m.occurrences, m.name))
    return ranked if k is None else ranked[:max(k, 0)]


def merge_reports(r1: CorpusReport, r2: CorpusReport) -> CorpusReport:
    """Union of two reports over disjoint document sets."""
    dup = {r.doc_id for r in r1.documents} & {r.doc_id for r in r2.documents}
    if dup:
        raise DuplicateDocumentId(f"document ids in both reports: {', '.join(sorted(dup))}")
    feedback = dict(r1.feedback)
    for key, val in r2.feedback.items():
        feedback[key] = feedback.get(key, 0) + val
    return CorpusReport(r1.documents + r2.documents, r1.wall_time + r2.wall_time, feedback)


def load_feedback(path: Path) -> Dict[str, int]:
    """Read a ``doc id, report count`` CSV (a header row is allowed)."""
    out: Dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if len(row) < 2:
                continue
            try:
                n = int(row[1])
            except ValueError:
                continue
            out[row[0].strip()] = out.get(row[0].strip(), 0) + n
    return out


def feedback_ranking(report: CorpusReport) -> List[dict]:
    """Missing macros weighted by reader reports on the documents that use them."""
    weight: Dict[str, int] = {}
    for r in report.documents:
        n = report.feedback.get(r.doc_id, 0)
        for m in r.missing_macros:
            weight[m.name] = weight.get(m.name, 0) + n
    freq = report.macro_frequency()
    ranked = sorted(freq.values(), key=lambda m: (-weight.get(m.name, 0), -m.documents, -m.occurrences, m.name))
    return [{**m.to_json(), "reports": weight.get(m.name, 0)} for m in ranked]


def convert_corpus(input_dir, config: Optional[HarnessConfig] = None, output_dir=None, *,
                   feedback: Optional[Mapping[str, int]] = None) -> CorpusReport:
    """Convert every document under ``input_dir``.

    With ``output_dir`` set, writes one HTML page per converted document,
    the theme, ``report.jsonl`` and ``summary.json`` there.
    """
    config = config or HarnessConfig()
    docs = discover(Path(input_dir))
    start = time.perf_counter()
    jobs = [(doc_id, path, config) for doc_id, path in docs]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_job, j) for j in jobs]
            results = []
            for (doc_id, _, _), fut in zip(jobs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - a dead worker fails its document only
                    results.append((ConversionReport(doc_id, FAILED, [Diagnostic(
                        Severity.FATAL, "worker-crash", f"{type(exc).__name__}: {exc}")]), None))
    else:
        results = [_job(j) for j in jobs]
    report = CorpusReport([r for r, _ in results], time.perf_counter() - start, dict(feedback or {}))
    if output_dir is not None:
        write_outputs(report, {r.doc_id: html for r, html in results if html is not None}, Path(output_dir))
    return report


def write_outputs(report: CorpusReport, pages: Mapping[str, str], output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / THEME_FILE).write_bytes(default_theme())
    for doc_id in sorted(pages):
        (output_dir / f"{doc_id}.html").write_text(pages[doc_id], encoding="utf-8")
    with open(output_dir / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in report.documents:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    (output_dir / "summary.json").write_text(
        json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ranking = rank_missing_macros(report)
    (output_dir / "ranking.txt").write_text(
        "".join(f"{m.name}\t{m.documents}\t{m.occurrences}\n" for m in ranking), encoding="utf-8")


def read_reports(path: Path) -> List[ConversionReport]:
    with open(path, encoding="utf-8") as fh:
        return [ConversionReport.from_json(json.loads(line)) for line in fh if line.strip()]


# -- throughput ------------------------------------------------------------

@dataclass
class BenchSummary:
    repetitions: int
    documents: int
    docs_per_second: List[float]
    stage_medians_ms: Dict[str, float]
    per_doc_median_ms: float
    wall_times: List[float]
    reference: Optional[dict] = None

    @property
    def median_docs_per_second(self) -> float:
        return statistics.median(self.docs_per_second)

    @property
    def spread(self) -> Tuple[float, float]:
        return min(self.docs_per_second), max(self.docs_per_second)

    def to_json(self) -> dict:
        data = {
            "repetitions": self.repetitions,
            "documents": self.documents,
            "docs_per_second": self.docs_per_second,
            "median_docs_per_second": self.median_docs_per_second,
            "spread_docs_per_second": list(self.spread),
            "stage_medians_ms": self.stage_medians_ms,
            "per_doc_median_ms": self.per_doc_median_ms,
            "wall_times_s": self.wall_times,
        }
        if self.reference is not None:
            data["reference"] = self.reference
        return data


def _load_corpus(corpus) -> List[Tuple[str, Optional[Path], Optional[str]]]:
    """(id, path, source) triples; directories keep their paths so reading is timed too."""
    if isinstance(corpus, (str, os.PathLike)):
        return [(doc_id, path, None) for doc_id, path in discover(Path(corpus))]
    return [(doc_id, None, source) for doc_id, source in corpus]


def _convert_item(item, config: HarnessConfig) -> ConversionReport:
    doc_id, path, source = item
    if source is not None:
        return convert_source(source, doc_id, config).report
    return convert_document(doc_id, path, config).report


def benchmark(corpus, repetitions: int = 3, config: Optional[HarnessConfig] = None, *,
              reference_cmd: Optional[str] = None) -> BenchSummary:
    """Time sequential conversion of ``corpus`` (a directory or ``(id, source)`` pairs).

    Every document counts, including ones that fail.  ``reference_cmd`` is
    an optional external converter command line with ``{input}`` and
    ``{output}`` placeholders; when given, each document is also converted
    by it and the speedup ratio is reported.
    """
    config = config or HarnessConfig()
    docs = _load_corpus(corpus)
    rates: List[float] = []
    walls: List[float] = []
    stage: Dict[str, List[float]] = {s: [] for s in STAGES + ("total",)}
    if docs:
        _convert_item(docs[0], config)  # warm-up: kernel loading is not throughput
    for _ in range(max(repetitions, 1)):
        t0 = time.perf_counter()
        for item in docs:
            rep = _convert_item(item, config)
            for s in stage:
                stage[s].append(rep.timings.get(s, 0.0))
        wall = time.perf_counter() - t0
        walls.append(wall)
        rates.append(len(docs) / wall if wall > 0 else 0.0)
    medians = {s: statistics.median(v) if v else 0.0 for s, v in stage.items()}
    summary = BenchSummary(max(repetitions, 1), len(docs), rates,
                           {s: medians[s] for s in STAGES}, medians["total"], walls)
    if reference_cmd:
        summary.reference = _reference_run(docs, reference_cmd, statistics.median(walls))
    return summary


def _reference_run(docs, command: str, own_wall: float) -> dict:
    t_total = 0.0
    failures = 0
    with tempfile.TemporaryDirectory() as tmp:
        for doc_id, path, source in docs:
            src = path
            if source is not None:
                src = Path(tmp) / f"{doc_id}.tex"
                src.write_text(source, encoding="utf-8")
            if src is None:  # bundle without a main file
                failures += 1
                continue
            argv = [a.format(input=str(src), output=str(Path(tmp) / f"{doc_id}.html"))
                    for a in shlex.split(command)]
            t0 = time.perf_counter()
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=600)
                failures += proc.returncode != 0
            except (OSError, subprocess.TimeoutExpired):
                failures += 1
            t_total += time.perf_counter() - t0
    return {"command": command, "wall_time_s": t_total, "failures": failures,
            "speedup": t_total / own_wall if own_wall > 0 else None}
