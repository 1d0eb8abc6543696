"""Schema-breaking mutations of MathML trees for validator completeness checks."""

from __future__ import annotations

import copy
import random
from typing import Callable, List, Optional, Tuple

from texhtml.mathml import MathMLNode

FIXED_ARITY = ("mfrac", "mroot", "msub", "msup", "msubsup", "munder", "mover", "munderover")
TOKEN_ELEMENTS = ("mi", "mn", "mo", "mtext")
NON_CORE = ("mfenced", "menclose", "font", "mblah", "mstyle2", "maction", "div")
BAD_INTENTS = ("two words", ":", "1abc", "f(x", ":literal:", "a::b", "-x", "$")
BAD_VALUES = {"display": "sideways", "mathvariant": "bold", "stretchy": "yes", "fence": "maybe",
              "movablelimits": "1", "accent": "TRUE", "form": "middle", "displaystyle": "0"}


def _nodes(root: MathMLNode) -> List[Tuple[MathMLNode, Optional[MathMLNode]]]:
    out = []

    def rec(n, parent):
        out.append((n, parent))
        for c in n.children:
            if isinstance(c, MathMLNode):
                rec(c, n)

    rec(root, None)
    return out


def rename(root, rng):
    node, _ = rng.choice(_nodes(root))
    node.name = rng.choice(NON_CORE)
    return f"rename to <{node.name}>"


def inject_attribute(root, rng):
    node, _ = rng.choice(_nodes(root))
    attr = rng.choice(("bogus", "style", "onclick", "columnspan", "href", "fontsize"))
    node.attrs[attr] = "1"
    return f"inject {attr}"


def break_intent(root, rng):
    root.attrs["intent"] = rng.choice(BAD_INTENTS)
    return f"intent={root.attrs['intent']!r}"


def bad_value(root, rng):
    attr = rng.choice(sorted(BAD_VALUES))
    holders = {"display": "math", "mathvariant": "mi", "stretchy": "mo", "fence": "mo", "movablelimits": "mo",
               "accent": "mover", "form": "mo", "displaystyle": None}
    want = holders[attr]
    nodes = [n for n, _ in _nodes(root) if want is None or n.name == want] or [root]
    node = rng.choice(nodes)
    if want is not None and node.name != want:
        attr = "displaystyle"
    node.attrs[attr] = BAD_VALUES[attr]
    return f"{attr}={BAD_VALUES[attr]!r} on <{node.name}>"


def change_arity(root, rng):
    nodes = [n for n, _ in _nodes(root) if n.name in FIXED_ARITY]
    if not nodes:
        # wrap a node so there is something with fixed arity, then break it
        node, _ = rng.choice(_nodes(root)[2:] or _nodes(root))
        node.children.append(MathMLNode("mfrac", {}, [MathMLNode("mn", {}, ["1"])]))
        return "add one-child mfrac"
    node = rng.choice(nodes)
    kids = [k for k, c in enumerate(node.children) if isinstance(c, MathMLNode)]
    if rng.random() < 0.5:
        del node.children[rng.choice(kids)]
        return f"drop child of <{node.name}>"
    node.children.append(MathMLNode("mi", {}, ["z"]))
    return f"add child to <{node.name}>"


def element_in_token(root, rng):
    nodes = [n for n, _ in _nodes(root) if n.name in TOKEN_ELEMENTS]
    if not nodes:
        node = MathMLNode("mi", {}, ["q"])
        _nodes(root)[1][0].children.insert(0, node)  # first child of semantics
        nodes = [node]
    node = rng.choice(nodes)
    node.children.append(MathMLNode("mi", {}, ["x"]))
    return f"element inside <{node.name}>"


def bare_text(root, rng):
    sem = _nodes(root)[1][0]
    body = sem.children[0]
    if isinstance(body, MathMLNode) and body.name not in TOKEN_ELEMENTS + ("annotation",):
        body.children.insert(0, "stray")
    else:
        sem.children.insert(1, "stray")
    return "bare text"


def annotation_first(root, rng):
    sem = _nodes(root)[1][0]
    sem.children.reverse()
    return "annotation first"


def misplaced_cell(root, rng):
    node, _ = rng.choice([(n, p) for n, p in _nodes(root) if n.name not in TOKEN_ELEMENTS + ("annotation",)
                          and n.name not in ("math", "semantics", "mtr", "mtable")] or _nodes(root)[2:3])
    node.children.append(MathMLNode("mtd", {}, [MathMLNode("mi", {}, ["c"])]))
    return f"mtd inside <{node.name}>"


MUTATIONS: List[Callable] = [rename, inject_attribute, break_intent, bad_value, change_arity,
                             element_in_token, bare_text, annotation_first, misplaced_cell]


def mutate(root: MathMLNode, rng: random.Random) -> Tuple[MathMLNode, str]:
    """A deep copy of ``root`` with one schema rule broken, and a description."""
    tree = copy.deepcopy(root)
    op = rng.choice(MUTATIONS)
    return tree, op(tree, rng)
