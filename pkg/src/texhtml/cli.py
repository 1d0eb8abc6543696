"""Command-line entry point.

Exit codes: 0 success or error-free, 1 completed with errors, 2 failed or
violations found, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__, fixtures, harness
from .diagnostics import InputDirUnreadable
from .mathml import parse_mathml
from .validator import validate_core

EXIT_OK = 0
EXIT_ERRORS = 1
EXIT_FAILED = 2
EXIT_USAGE = 64

ENV_OUTPUT = "TEXHTML_OUTPUT_DIR"
ENV_WORKERS = "TEXHTML_WORKERS"

log = logging.getLogger("texhtml")


class UsageError(Exception):
    def __init__(self, message: str, help_shown: bool = False):
        super().__init__(message)
        self.help_shown = help_shown


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message, help_shown=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="texhtml", description="Convert LaTeX to HTML with MathML Core.")
    p.add_argument("--version", action="version", version=f"texhtml {__version__}")
    p.add_argument("--config", type=Path, help="JSON file with default option values")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="mode", parser_class=_Parser)

    c = sub.add_parser("convert", help="convert one document")
    c.add_argument("input", type=Path)
    c.add_argument("-o", "--output", type=Path)
    c.add_argument("--theme-ref")
    c.add_argument("--math-mode", choices=("embedded", "standalone-xml"))
    c.add_argument("--timeout", type=float)
    c.add_argument("--json", action="store_true", help="also print the report on standard output")

    k = sub.add_parser("corpus", help="convert a directory of documents")
    k.add_argument("input", type=Path)
    k.add_argument("-o", "--output", type=Path)
    k.add_argument("-j", "--workers", type=int)
    k.add_argument("--theme-ref")
    k.add_argument("--math-mode", choices=("embedded", "standalone-xml"))
    k.add_argument("--timeout", type=float)
    k.add_argument("--feedback", type=Path, help="CSV of document id, report count")
    k.add_argument("--json", action="store_true", help="print summary.json on standard output")

    v = sub.add_parser("validate", help="validate a MathML file against MathML Core")
    v.add_argument("input", type=Path)
    v.add_argument("--json", action="store_true", help="one JSON object per violation")

    b = sub.add_parser("bench", help="measure throughput over a corpus")
    b.add_argument("input", type=Path)
    b.add_argument("-n", "--repetitions", type=int)
    b.add_argument("--reference", help="external converter command with {input} and {output}")
    b.add_argument("--json", action="store_true")

    s = sub.add_parser("suite", help="run the golden fixture suite")
    s.add_argument("fixtures", type=Path, nargs="?", default=Path("fixtures"))
    s.add_argument("--category", choices=fixtures.CATEGORIES)
    s.add_argument("--regenerate", action="store_true", help="rewrite goldens instead of checking")
    return p


def _settings(args, keys: Sequence[str]) -> dict:
    """Option values with precedence flag > environment > config file."""
    conf = {}
    if args.config is not None:
        try:
            conf = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
    env = {}
    if os.environ.get(ENV_OUTPUT):
        env["output"] = os.environ[ENV_OUTPUT]
    if os.environ.get(ENV_WORKERS):
        try:
            env["workers"] = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise UsageError(f"{ENV_WORKERS} must be an integer")
    out = {}
    for key in keys:
        val = getattr(args, key, None)
        if val is None:
            val = env.get(key, conf.get(key.replace("_", "-"), conf.get(key)))
        out[key] = val
    return out


def _harness_config(opts: dict) -> harness.HarnessConfig:
    cfg = harness.HarnessConfig()
    if opts.get("workers") is not None:
        cfg.workers = max(int(opts["workers"]), 1)
    if opts.get("timeout") is not None:
        cfg.timeout = float(opts["timeout"])
    if opts.get("theme_ref"):
        cfg.theme_ref = str(opts["theme_ref"])
    if opts.get("math_mode"):
        cfg.math_mode = str(opts["math_mode"])
    return cfg


def _need_output(opts: dict) -> Path:
    if not opts.get("output"):
        raise UsageError(f"an output directory is required (-o or {ENV_OUTPUT})")
    return Path(opts["output"]).resolve()


def cmd_convert(args) -> int:
    opts = _settings(args, ("output", "theme_ref", "math_mode", "timeout"))
    src = args.input.resolve()
    if not src.is_file():
        raise UsageError(f"no such input file: {args.input}")
    out = _need_output(opts)
    cfg = _harness_config(opts)
    result = harness.convert_document(src.stem, src, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if result.html is not None:
        (out / f"{src.stem}.html").write_text(result.html, encoding="utf-8")
        if cfg.theme_ref == harness.THEME_FILE:
            (out / harness.THEME_FILE).write_bytes(harness.default_theme())
    report = json.dumps(result.report.to_json(), indent=2, sort_keys=True, ensure_ascii=False)
    (out / f"{src.stem}.report.json").write_text(report + "\n", encoding="utf-8")
    if args.json:
        print(report)
    for d in result.report.diagnostics:
        log.info("%s: %s %s: %s", src.name, d.severity.value, d.code, d.message)
    log.info("%s: %s", src.name, result.report.status)
    return {harness.ERROR_FREE: EXIT_OK, harness.WITH_ERRORS: EXIT_ERRORS}.get(result.report.status, EXIT_FAILED)


def cmd_corpus(args) -> int:
    opts = _settings(args, ("output", "workers", "theme_ref", "math_mode", "timeout", "feedback"))
    src = args.input.resolve()
    if not src.is_dir():
        raise UsageError(f"no such input directory: {args.input}")
    out = _need_output(opts)
    feedback = harness.load_feedback(Path(opts["feedback"])) if opts.get("feedback") else None
    try:
        report = harness.convert_corpus(src, _harness_config(opts), out, feedback=feedback)
    except InputDirUnreadable as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    summary = report.summary()
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    log.warning("%d documents: %d error-free, %d with errors, %d failed", summary["documents"],
                summary["error_free"], summary["completed_with_errors"], summary["failed"])
    return EXIT_OK if summary["failed"] == 0 else EXIT_FAILED


def cmd_validate(args) -> int:
    try:
        node = parse_mathml(args.input.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such input file: {args.input}")
    except Exception as exc:  # noqa: BLE001 - unparseable markup is itself a violation
        msg = {"path": [], "rule": "well-formed", "message": str(exc)}
        print(json.dumps(msg) if args.json else f"[] well-formed: {exc}")
        return EXIT_FAILED
    violations = validate_core(node)
    for v in violations:
        print(json.dumps(v.to_json()) if args.json else f"{list(v.path)} {v.rule}: {v.message}")
    return EXIT_FAILED if violations else EXIT_OK


def cmd_bench(args) -> int:
    opts = _settings(args, ("repetitions", "reference"))
    src = args.input.resolve()
    if not src.is_dir():
        raise UsageError(f"no such corpus directory: {args.input}")
    summary = harness.benchmark(src, int(opts.get("repetitions") or 3), reference_cmd=opts.get("reference"))
    if args.json:
        print(json.dumps(summary.to_json(), indent=2, sort_keys=True))
    else:
        lo, hi = summary.spread
        print(f"documents: {summary.documents}  repetitions: {summary.repetitions}")
        print(f"documents/second: median {summary.median_docs_per_second:.1f} (min {lo:.1f}, max {hi:.1f})")
        print("stage medians (ms): " + "  ".join(f"{k} {v:.3f}" for k, v in summary.stage_medians_ms.items()))
        print(f"per-document median (ms): {summary.per_doc_median_ms:.3f}")
        if summary.reference:
            print(f"reference speedup: {summary.reference['speedup']}")
    return EXIT_OK


def cmd_suite(args) -> int:
    if not args.fixtures.is_dir():
        raise UsageError(f"no such fixture directory: {args.fixtures}")
    if args.regenerate:
        n = fixtures.regenerate(args.fixtures, args.category)
        print(f"regenerated {n} fixtures")
        return EXIT_OK
    results = fixtures.run_suite(args.fixtures, args.category)
    for r in results:
        for diff in r.diffs.values():
            sys.stderr.write(diff)
    sys.stdout.write(fixtures.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


COMMANDS = {"convert": cmd_convert, "corpus": cmd_corpus, "validate": cmd_validate,
            "bench": cmd_bench, "suite": cmd_suite}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.mode is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
        logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
        return COMMANDS[args.mode](args)
    except UsageError as exc:
        if not exc.help_shown:
            parser.print_usage(sys.stderr)
        sys.stderr.write(f"texhtml: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
