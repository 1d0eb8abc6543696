"""Structural validation of MathML against the Core vocabulary.

The rules come from the declarative ``core_schema.json`` asset so that the
tests and the validator share a single description of the vocabulary.
"""

from __future__ import annotations

import re
from typing import List, NamedTuple, Optional, Tuple

from . import assets
from .mathml import MathMLNode

_NAME = r"[A-Za-z][A-Za-z0-9_.\-]*"
_INTENT = re.compile(rf"^(?:_?{_NAME})?(?::{_NAME})*$")


class Violation(NamedTuple):
    path: Tuple[int, ...]
    rule: str
    message: str

    def to_json(self) -> dict:
        return {"path": list(self.path), "rule": self.rule, "message": self.message}


def validate_intent(value: Optional[str]) -> bool:
    """Accept a property (``:literal``), a concept name, or an ``_underscore`` literal."""
    if not value:
        return False
    return bool(_INTENT.match(value))


def validate_core(node: MathMLNode) -> List[Violation]:
    """Every violation of the Core schema in the tree rooted at ``node``."""
    schema = assets.core_schema()
    out: List[Violation] = []
    _check(node, (), None, schema, out)
    return out


def _check(node: MathMLNode, path, parent: Optional[str], schema, out: List[Violation]) -> None:
    elements = schema["elements"]
    name = node.name
    known = name in elements
    if not known:
        out.append(Violation(path, "element-whitelist", f"<{name}> is not a MathML Core element"))
    allowed = set(elements.get(name, ())) | set(schema["global_attributes"])
    values = schema["attribute_values"]
    for attr, val in sorted(node.attrs.items()):
        if attr == "xmlns" or attr.startswith("data-"):
            continue
        if known and attr not in allowed:
            out.append(Violation(path, "attribute-whitelist", f"attribute {attr!r} not allowed on <{name}>"))
            continue
        if attr == "intent":
            if not validate_intent(val):
                out.append(Violation(path, "intent-syntax", f"bad intent value {val!r}"))
        elif attr in values and val not in values[attr]:
            out.append(Violation(path, "attribute-value", f"{attr}={val!r} is not an allowed value"))
    kids = node.element_children()
    texts = [c for c in node.children if isinstance(c, str)]
    if name in schema["text_only"]:
        if kids:
            out.append(Violation(path, "text-content", f"<{name}> must contain only text"))
    elif any(t.strip() for t in texts):
        out.append(Violation(path, "text-content", f"<{name}> must not contain bare text"))
    arity = schema["arity"].get(name)
    if arity is not None:
        lo, hi = arity
        if len(kids) < lo or (hi is not None and len(kids) > hi):
            want = str(lo) if lo == hi else f"{lo}..{'' if hi is None else hi}"
            out.append(Violation(path, "arity", f"<{name}> needs {want} children, has {len(kids)}"))
    only = schema["children"].get(name)
    if only:
        for k, c in enumerate(node.children):
            if isinstance(c, MathMLNode) and c.name not in only:
                out.append(Violation(path + (k,), "child-element", f"<{c.name}> not allowed inside <{name}>"))
    if name == "semantics" and kids:
        if kids[0].name in ("annotation", "annotation-xml"):
            out.append(Violation(path, "child-element", "<semantics> must start with presentation markup"))
        for k, c in enumerate(node.children):
            if isinstance(c, MathMLNode) and c is not kids[0] and c.name != "annotation":
                out.append(Violation(path + (k,), "child-element", f"<{c.name}> after the first child of <semantics>"))
    parents = schema["parents"].get(name)
    if parents and parent is not None and parent not in parents:
        out.append(Violation(path, "child-element", f"<{name}> not allowed inside <{parent}>"))
    for k, c in enumerate(node.children):
        if isinstance(c, MathMLNode):
            _check(c, path + (k,), name, schema, out)


def resolve(node: MathMLNode, path: Tuple[int, ...]) -> MathMLNode:
    """The node a violation path points at."""
    cur = node
    for k in path:
        cur = cur.children[k]
    return cur
