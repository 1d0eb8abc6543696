"""MathML Core emission and serialization."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Dict, List, Optional, Union

from .mathgrammar import (
    IDENTIFIER, NUMBER, OPERATOR, Accent, Array, Atom, BigOperator, Fenced, Fraction, MathExpr,
    Radical, Row, Script, Space, TextInMath,
)

MATHML_NS = "http://www.w3.org/1998/Math/MathML"
TEX_ENCODING = "application/x-tex"
LITERAL_INTENT = ":literal"


@dataclass
class MathMLNode:
    name: str
    attrs: Dict[str, str] = field(default_factory=dict)
    children: List[Union["MathMLNode", str]] = field(default_factory=list)

    def element_children(self) -> List["MathMLNode"]:
        return [c for c in self.children if isinstance(c, MathMLNode)]

    def text(self) -> str:
        return "".join(c if isinstance(c, str) else c.text() for c in self.children)

    def iter(self):
        yield self
        for c in self.children:
            if isinstance(c, MathMLNode):
                yield from c.iter()


def _el(name: str, *children, **attrs) -> MathMLNode:
    return MathMLNode(name, {k.replace("_", "-"): v for k, v in attrs.items()}, list(children))


def atom_to_element(atom: Atom) -> MathMLNode:
    if atom.cls == NUMBER:
        return MathMLNode("mn", {}, [atom.text] if atom.text else [])
    if atom.cls == IDENTIFIER:
        attrs = {}
        if atom.variant == "normal" or len(atom.text) > 1:
            attrs["mathvariant"] = "normal"
        return MathMLNode("mi", attrs, [atom.text] if atom.text else [])
    attrs = {}
    if atom.stretchy is not None:
        attrs["stretchy"] = "true" if atom.stretchy else "false"
    if atom.size is not None:
        attrs["minsize"] = atom.size
        attrs["maxsize"] = atom.size
    return MathMLNode("mo", attrs, [atom.text] if atom.text else [])


def _one(expr: MathExpr) -> MathMLNode:
    """Exactly one element for ``expr`` (rows become mrow)."""
    if isinstance(expr, Atom):
        return atom_to_element(expr)
    if isinstance(expr, Row):
        return MathMLNode("mrow", {}, [_one(c) for c in expr.children])
    if isinstance(expr, Script):
        base = _one(expr.base)
        if expr.sub is not None and expr.sup is not None:
            return MathMLNode("msubsup", {}, [base, _one(expr.sub), _one(expr.sup)])
        if expr.sub is not None:
            return MathMLNode("msub", {}, [base, _one(expr.sub)])
        return MathMLNode("msup", {}, [base, _one(expr.sup)])
    if isinstance(expr, Fraction):
        attrs = {} if expr.line else {"linethickness": "0"}
        return MathMLNode("mfrac", attrs, [_one(expr.num), _one(expr.den)])
    if isinstance(expr, Radical):
        if expr.index is None:
            return MathMLNode("msqrt", {}, [_one(expr.radicand)])
        return MathMLNode("mroot", {}, [_one(expr.radicand), _one(expr.index)])
    if isinstance(expr, Fenced):
        return MathMLNode("mrow", {}, [
            _fence(expr.open), *[_one(c) for c in expr.body.children], _fence(expr.close)])
    if isinstance(expr, BigOperator):
        op = atom_to_element(expr.op)
        if expr.op.cls == OPERATOR:
            op.attrs["movablelimits"] = "false"
        if expr.under is None and expr.over is None:
            return op
        if expr.limits:
            if expr.under is not None and expr.over is not None:
                return MathMLNode("munderover", {}, [op, _one(expr.under), _one(expr.over)])
            if expr.under is not None:
                return MathMLNode("munder", {}, [op, _one(expr.under)])
            return MathMLNode("mover", {}, [op, _one(expr.over)])
        if expr.under is not None and expr.over is not None:
            return MathMLNode("msubsup", {}, [op, _one(expr.under), _one(expr.over)])
        if expr.under is not None:
            return MathMLNode("msub", {}, [op, _one(expr.under)])
        return MathMLNode("msup", {}, [op, _one(expr.over)])
    if isinstance(expr, Accent):
        if expr.under:
            attrs = {"accentunder": "true"} if expr.accent else {}
            return MathMLNode("munder", attrs, [_one(expr.base), _one(expr.mark)])
        attrs = {"accent": "true"} if expr.accent else {}
        return MathMLNode("mover", attrs, [_one(expr.base), _one(expr.mark)])
    if isinstance(expr, Array):
        return MathMLNode("mtable", {}, [
            MathMLNode("mtr", {}, [MathMLNode("mtd", {}, _cell(c)) for c in row]) for row in expr.rows])
    if isinstance(expr, TextInMath):
        return MathMLNode("mtext", {}, [expr.text] if expr.text else [])
    if isinstance(expr, Space):
        if expr.phantom is not None:
            return MathMLNode("mphantom", {}, [_one(expr.phantom)])
        return MathMLNode("mspace", {"width": expr.width})
    raise TypeError(f"not a math expression: {expr!r}")


def _cell(expr: MathExpr) -> List[MathMLNode]:
    if isinstance(expr, Row):
        return [_one(c) for c in expr.children]
    return [_one(expr)]


def _fence(atom: Atom) -> MathMLNode:
    node = atom_to_element(Atom(atom.text, OPERATOR, True if atom.stretchy is None else atom.stretchy,
                                atom.size))
    node.attrs["fence"] = "true"
    return node


def emit_math(expr: MathExpr, tex: str, display: bool = False) -> MathMLNode:
    """The math element for ``expr`` with the literal intent and the TeX annotation."""
    presentation = _one(expr)
    annotation = MathMLNode("annotation", {"encoding": TEX_ENCODING}, [tex] if tex else [])
    semantics = MathMLNode("semantics", {}, [presentation, annotation])
    return MathMLNode("math", {"display": "block" if display else "inline", "intent": LITERAL_INTENT},
                      [semantics])


# -- serialization ---------------------------------------------------------

_TEXT_ESCAPES = str.maketrans({"&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&#39;"})


def escape(text: str) -> str:
    return text.translate(_TEXT_ESCAPES)


def serialize(node: MathMLNode, *, xmlns: bool = False) -> str:
    parts: List[str] = []
    _ser(node, parts, xmlns)
    return "".join(parts)


def _ser(node: MathMLNode, out: List[str], xmlns: bool) -> None:
    attrs = dict(node.attrs)
    if xmlns:
        attrs["xmlns"] = MATHML_NS
    out.append("<" + node.name)
    for k in sorted(attrs):
        out.append(f' {k}="{escape(attrs[k])}"')
    if not node.children:
        out.append("/>")
        return
    out.append(">")
    for c in node.children:
        if isinstance(c, str):
            out.append(escape(c))
        else:
            _ser(c, out, False)
    out.append(f"</{node.name}>")


def _strip_ns(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def from_element(el: ET.Element) -> MathMLNode:
    node = MathMLNode(_strip_ns(el.tag), {_strip_ns(k): v for k, v in el.attrib.items()})
    if el.text:
        node.children.append(el.text)
    for child in el:
        node.children.append(from_element(child))
        if child.tail:
            node.children.append(child.tail)
    return node


def parse_mathml(text: str) -> MathMLNode:
    """Parse standalone MathML markup (namespaced or not)."""
    return from_element(ET.fromstring(text))


class _MathCollector(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.found: List[MathMLNode] = []
        self.stack: List[MathMLNode] = []

    def handle_starttag(self, tag, attrs):
        if tag != "math" and not self.stack:
            return
        node = MathMLNode(tag, {k: (v or "") for k, v in attrs})
        if self.stack:
            self.stack[-1].children.append(node)
        self.stack.append(node)

    def handle_startendtag(self, tag, attrs):
        if tag != "math" and not self.stack:
            return
        node = MathMLNode(tag, {k: (v or "") for k, v in attrs})
        if self.stack:
            self.stack[-1].children.append(node)
        else:
            self.found.append(node)

    def handle_endtag(self, tag):
        if not self.stack:
            return
        node = self.stack.pop()
        while node.name != tag and self.stack:
            node = self.stack.pop()
        if not self.stack:
            self.found.append(node)

    def handle_data(self, data):
        if self.stack:
            kids = self.stack[-1].children
            if kids and isinstance(kids[-1], str):
                kids[-1] += data
            else:
                kids.append(data)


def math_in_html(html: str) -> List[MathMLNode]:
    """Every ``<math>`` element in an HTML page, in document order."""
    p = _MathCollector()
    p.feed(html)
    p.close()
    return p.found


def annotation_text(math: MathMLNode) -> Optional[str]:
    for n in math.iter():
        if n.name == "annotation" and n.attrs.get("encoding") == TEX_ENCODING:
            return n.text()
    return None
