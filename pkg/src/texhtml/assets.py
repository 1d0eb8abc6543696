"""Loaders for the static data files shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Dict, List, NamedTuple


class SymbolEntry(NamedTuple):
    text: str
    cls: str  # identifier | number | operator


def read_text(name: str) -> str:
    return resources.files("texhtml").joinpath("data").joinpath(name).read_text(encoding="utf-8")


def read_bytes(name: str) -> bytes:
    return resources.files("texhtml").joinpath("data").joinpath(name).read_bytes()


@lru_cache(maxsize=None)
def operator_table() -> Dict[str, SymbolEntry]:
    """Input form (``\\alpha``, ``+``) mapped to its rendered text and class."""
    table: Dict[str, SymbolEntry] = {}
    for line in read_text("operators.tsv").splitlines():
        if not line or line.startswith("#"):
            continue
        form, codes, cls = line.split("\t")
        text = "".join(chr(int(c[2:], 16)) for c in codes.split())
        table[form] = SymbolEntry(text, cls)
    return table


@lru_cache(maxsize=None)
def core_schema() -> dict:
    return json.loads(read_text("core_schema.json"))


@lru_cache(maxsize=None)
def binding_manifest() -> List[str]:
    # no stripping: the control space is listed as a backslash and a space
    return [ln for ln in read_text("bindings.txt").splitlines() if ln and not ln.startswith("#")]


def theme_css() -> bytes:
    return read_bytes("theme.css")
