"""Compare the compiled lexer kernels against their pure Python versions.

Usage: python3 benchmarks/bench_tokenizer.py [corpus_dir] [--repeat N]

Both paths lex the same sources; the token arrays must agree exactly before
any timing is reported.
"""

from __future__ import annotations

import argparse
import statistics
import time
from pathlib import Path

import numpy as np

from texhtml import _accel, harness
from texhtml.tokenizer import _decode_hats, _scan, default_catcodes, scan_arrays

ROOT = Path(__file__).resolve().parent.parent


def _sources(corpus: Path) -> list:
    out = []
    for _, path in harness.discover(corpus):
        if path is None:
            continue
        try:
            out.append(harness.read_source(path))
        except (OSError, UnicodeDecodeError):
            continue
    return out


def _time(texts, cats, scan, decode, repeat: int) -> float:
    walls = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for text in texts:
            scan_arrays(text, cats, scan=scan, decode=decode)
        walls.append(time.perf_counter() - t0)
    return statistics.median(walls)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("corpus", nargs="?", type=Path, default=ROOT / "samples")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    texts = _sources(args.corpus)
    cats = default_catcodes().array
    chars = sum(len(t) for t in texts)

    pure_scan, pure_decode = _scan.py_func, _decode_hats.py_func
    for text in texts:
        fast = scan_arrays(text, cats)
        slow = scan_arrays(text, cats, scan=pure_scan, decode=pure_decode)
        assert all(np.array_equal(x, y) for x, y in zip(fast[:-1], slow[:-1])) and fast[-1] == slow[-1]

    pure = _time(texts, cats, pure_scan, pure_decode, args.repeat)
    fast = _time(texts, cats, _scan, _decode_hats, args.repeat)
    print(f"backend  {_accel.BACKEND}")
    print(f"input    {len(texts)} documents, {chars} characters")
    print(f"python   {pure * 1e3:9.2f} ms  {chars / pure / 1e6:7.2f} Mchar/s")
    print(f"kernel   {fast * 1e3:9.2f} ms  {chars / fast / 1e6:7.2f} Mchar/s")
    print(f"speedup  {pure / fast:9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
