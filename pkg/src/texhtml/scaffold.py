"""HTML page assembly.

Markup, theme and in-page services are kept apart: the page links the
stylesheet and (optionally) one deferred script, and never carries inline
styles or scripts.  Text that the converter invents (numbers, brackets,
block titles) is wrapped in elements with class ``gen`` so it can be told
apart from authored content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from html import escape
from html.parser import HTMLParser
from typing import Dict, List, Mapping, Optional

from . import __version__, assets
from .diagnostics import Diagnostic, warning
from .docmodel import DocNode, Frontmatter

BLOCK_TAGS = {"p", "li", "dt", "dd", "h1", "h2", "h3", "h4", "h5", "h6", "div", "section",
              "header", "main", "article", "pre", "td", "th", "tr", "table", "ul", "ol", "dl",
              "blockquote", "br", "figure"}
EMPHASIS_TAGS = {"emph": ("em", None), "bold": ("strong", None), "italic": ("i", None),
                 "tt": ("code", None), "underline": ("u", None), "sans": ("span", "sans"),
                 "smallcaps": ("span", "smallcaps"), "roman": ("span", "roman")}
BLOCK_TITLES = {"abstract": "Abstract", "proof": "Proof."}


@dataclass
class PageConfig:
    theme_ref: str = "texhtml.css"
    services_ref: Optional[str] = None
    lang: str = "en"
    today: str = ""


@dataclass
class PageAssembly:
    markup: str
    theme_ref: str
    services_ref: Optional[str]
    head: Dict[str, object] = field(default_factory=dict)
    diagnostics: List[Diagnostic] = field(default_factory=list)


def default_theme() -> bytes:
    """The built-in stylesheet, shipped as package data."""
    return assets.theme_css()


def _attr(name: str, value: object) -> str:
    return f' {name}="{escape(str(value), quote=True)}"'


def _text(s: str) -> str:
    return escape(s, quote=False)


def _gen(s: str, cls: str = "") -> str:
    return f'<span class="gen{(" " + cls) if cls else ""}">{_text(s)}</span>'


class _Writer:
    def __init__(self, math: Mapping[int, str], config: PageConfig):
        self.math = math
        self.config = config
        self.out: List[str] = []

    def w(self, s: str) -> None:
        self.out.append(s)

    # -- inline --

    def inline(self, nodes: List[DocNode]) -> None:
        for n in nodes:
            self.inline_node(n)

    def inline_node(self, n: DocNode) -> None:
        k = n.kind
        if k == "text-run":
            self.w(_text(n.text))
        elif k == "emphasis":
            tag, cls = EMPHASIS_TAGS.get(str(n.attrs.get("style")), ("span", None))
            self.w(f"<{tag}{_attr('class', cls) if cls else ''}>")
            self.inline(n.children)
            self.w(f"</{tag}>")
        elif k == "math":
            self.math_leaf(n)
        elif k == "ref":
            number = str(n.attrs.get("number", "??"))
            if n.attrs.get("style") == "paren":
                number = f"({number})"
            target = n.attrs.get("target")
            href = _attr("href", "#" + str(target)) if target else ""
            self.w(f'<a class="ref"{href}>{_gen(number)}</a>')
        elif k == "cite":
            keys = list(n.attrs.get("keys", []))
            self.w('<cite class="cite">' + _gen("["))
            for j, key in enumerate(keys):
                if j:
                    self.w(_gen(", "))
                self.w(_text(str(key)))
            self.w(_gen("]") + "</cite>")
        elif k == "footnote":
            num = str(n.attrs.get("number", ""))
            self.w(f'<span class="footnote"{_attr("id", "fn-" + num)}><sup class="gen">{_text(num)}</sup>'
                   '<span class="footnote-body">')
            for c in n.children:
                if c.kind == "paragraph":
                    self.inline(c.children)
                else:
                    self.inline_node(c)
            self.w("</span></span>")
        elif k == "link":
            self.w(f'<a{_attr("href", n.attrs.get("href", ""))}>')
            self.inline(n.children)
            self.w("</a>")
        elif k == "break":
            self.w("<br>")
        elif k == "code":
            self.w(f"<code>{_text(n.verbatim or '')}</code>")
        elif k == "generated":
            self.w(f'<span class="gen {escape(str(n.attrs.get("what", "")))}">{_text(self.config.today)}</span>')
        elif k == "fallback-blob":
            self.w(f'<code class="fallback"{_attr("data-construct", n.attrs.get("construct", ""))}>'
                   f"{_text(n.verbatim or '')}</code>")
        elif k == "paragraph":
            self.inline(n.children)
        else:
            self.inline(n.children)

    def math_leaf(self, n: DocNode) -> None:
        markup = self.math.get(n.attrs.get("index"))  # type: ignore[arg-type]
        if markup is None:
            self.w(f'<code class="fallback" data-construct="math">{_text(n.verbatim or "")}</code>')
        else:
            self.w(markup)

    # -- blocks --

    def blocks(self, nodes: List[DocNode], level: int) -> None:
        for n in nodes:
            self.block(n, level)

    def block(self, n: DocNode, level: int) -> None:
        k = n.kind
        if k == "paragraph":
            self.w("<p>")
            self.inline(n.children)
            self.w("</p>\n")
        elif k == "section":
            self.section(n, level)
        elif k == "list":
            self.list(n, level)
        elif k == "block":
            self.block_env(n, level)
        elif k == "equation":
            self.equation(n)
        elif k == "equation-group":
            self.w('<div class="equation-group">\n')
            for c in n.children:
                self.equation(c)
            self.w("</div>\n")
        elif k == "table-fallback":
            self.w(f'<table class="table-fallback"{_attr("data-construct", n.attrs.get("env", "tabular"))}><tbody>\n')
            for row in n.children:
                self.w("<tr>")
                for cell in row.children:
                    self.w("<td>")
                    self.inline(cell.children)
                    self.w("</td>")
                self.w("</tr>\n")
            self.w("</tbody></table>\n")
        elif k == "fallback-blob":
            self.w(f'<pre class="fallback"{_attr("data-construct", n.attrs.get("construct", ""))}>'
                   f"{_text(n.verbatim or '')}</pre>\n")
        elif k == "code":
            self.w(f'<pre class="verbatim">{_text(n.verbatim or "")}</pre>\n')
        elif k == "math":
            self.w('<div class="equation">')
            self.math_leaf(n)
            self.w("</div>\n")
        else:
            self.w("<p>")
            self.inline_node(n)
            self.w("</p>\n")

    def section(self, n: DocNode, level: int) -> None:
        ident = _attr("id", n.attrs["id"]) if n.attrs.get("id") else ""
        h = min(level + 1, 6)
        self.w(f'<section class="section"{ident}>\n<h{h}>')
        if n.attrs.get("number"):
            self.w(_gen(f"{n.attrs['number']} ", "secnum"))
        rest = list(n.children)
        if rest and rest[0].kind == "heading":
            self.inline(rest.pop(0).children)
        self.w(f"</h{h}>\n")
        self.blocks(rest, level + 1)
        self.w("</section>\n")

    def list(self, n: DocNode, level: int) -> None:
        kind = n.attrs.get("type")
        if kind == "description":
            self.w("<dl>\n")
            for item in n.children:
                rest = list(item.children)
                self.w("<dt>")
                if rest and rest[0].kind == "heading":
                    self.inline(rest.pop(0).children)
                self.w("</dt><dd>")
                self.blocks(rest, level)
                self.w("</dd>\n")
            self.w("</dl>\n")
            return
        tag = "ol" if kind == "enumerate" else "ul"
        self.w(f"<{tag}>\n")
        for item in n.children:
            rest = list(item.children)
            ident = _attr("id", item.attrs["id"]) if item.attrs.get("id") else ""
            self.w(f"<li{ident}>")
            if rest and rest[0].kind == "heading":
                self.w('<span class="item-label">')
                self.inline(rest.pop(0).children)
                self.w("</span>" + _gen(" "))
            self.blocks(rest, level)
            self.w(f"</li>\n")
        self.w(f"</{tag}>\n")

    def block_env(self, n: DocNode, level: int) -> None:
        role = str(n.attrs.get("role", "block"))
        env = str(n.attrs.get("env", role))
        ident = _attr("id", n.attrs["id"]) if n.attrs.get("id") else ""
        rest = list(n.children)
        head = rest.pop(0) if rest and rest[0].kind == "heading" else None
        if role == "quote":
            self.w(f"<blockquote{ident}>\n")
            self.blocks(rest, level)
            self.w("</blockquote>\n")
            return
        classes = "block" if role == env else f"block {role} {env}"
        if role == env:
            classes = f"block {role}"
        self.w(f'<div{_attr("class", classes)}{ident}>\n')
        title = BLOCK_TITLES.get(role)
        if role == "theorem":
            title = str(n.attrs.get("label", env))
            if n.attrs.get("number"):
                title += " " + str(n.attrs["number"])
        if title or head is not None:
            self.w('<p class="block-title">')
            if title:
                self.w(_gen(title))
            if head is not None:
                self.w(_gen(" ("))
                self.inline(head.children)
                self.w(_gen(")"))
            self.w("</p>\n")
        self.blocks(rest, level)
        self.w("</div>\n")

    def equation(self, n: DocNode) -> None:
        ident = _attr("id", n.attrs["id"]) if n.attrs.get("id") else ""
        self.w(f'<div class="equation"{ident}>')
        for c in n.children:
            if c.kind == "math":
                self.math_leaf(c)
        if n.attrs.get("number"):
            self.w(_gen(f"({n.attrs['number']})", "tag"))
        self.w("</div>\n")

    # -- frontmatter --

    def header(self, fm: Frontmatter, fields: List[DocNode]) -> None:
        groups = front_order(fields)
        self.w('<header class="frontmatter">\n')
        if fm.title is not None:
            self.w('<h1 class="title">')
            self.inline(fm.title.children)
            self.w("</h1>\n")
        if groups["author"]:
            self.w('<ul class="authors">\n')
            for node in groups["author"]:
                self.w('<li class="author">')
                self.inline([c for c in node.children if c.kind != "field"])
                refs = [str(r) for r in node.attrs.get("refs", []) if str(r) in fm.affiliations]
                if refs:
                    self.w(f'<sup class="gen">{_text(",".join(refs))}</sup>')
                for c in node.children:
                    if c.kind == "field":
                        self.w(" " + f'<span{_attr("class", c.attrs.get("name"))}>')
                        self.inline(c.children)
                        self.w("</span>")
                self.w("</li>\n")
            self.w("</ul>\n")
        if fm.affiliations:
            self.w('<ul class="affiliations">\n')
            for key, node in fm.affiliations.items():
                self.w(f'<li{_attr("id", "aff-" + key)}><sup class="gen">{_text(key)}</sup>')
                self.inline(node.children)
                self.w("</li>\n")
            self.w("</ul>\n")
        for node in groups["other"]:
            self.w(f'<p{_attr("class", node.attrs.get("name"))}>')
            self.inline(node.children)
            self.w("</p>\n")
        self.w("</header>\n")


def front_order(fields: List[DocNode]) -> Dict[str, List[DocNode]]:
    """Frontmatter fields grouped in the order the page header shows them."""
    groups: Dict[str, List[DocNode]] = {"title": [], "author": [], "affiliation": [], "other": []}
    for f in fields:
        name = f.attrs.get("name")
        if name == "author":
            if any(c.kind != "field" and c.text_content().strip() for c in f.children):
                groups["author"].append(f)
        elif name in ("title", "affiliation"):
            groups[str(name)].append(f)
        else:
            groups["other"].append(f)
    return groups


def assemble_page(tree: DocNode, frontmatter: Frontmatter, config: Optional[PageConfig] = None,
                  math: Optional[Mapping[int, str]] = None) -> PageAssembly:
    """A complete HTML page for ``tree``; ``math`` maps math-leaf index to its markup."""
    config = config or PageConfig()
    wr = _Writer(math or {}, config)
    diags: List[Diagnostic] = []
    title = frontmatter.title_text
    authors = [a.name for a in frontmatter.authors]
    body = [c for c in tree.children if c.kind != "frontmatter"]
    wr.w(f"<!DOCTYPE html>\n<html{_attr('lang', config.lang)}>\n<head>\n<meta charset=\"utf-8\">\n")
    wr.w('<meta name="viewport" content="width=device-width, initial-scale=1">\n')
    wr.w(f"<title>{_text(title or 'Untitled document')}</title>\n")
    for a in authors:
        wr.w(f'<meta name="author"{_attr("content", a)}>\n')
    if frontmatter.metadata.get("keywords"):
        wr.w(f'<meta name="keywords"{_attr("content", frontmatter.metadata["keywords"])}>\n')
    wr.w(f'<meta name="generator"{_attr("content", "texhtml " + __version__)}>\n')
    wr.w(f'<link rel="stylesheet"{_attr("href", config.theme_ref)}>\n')
    if config.services_ref:
        wr.w(f'<script defer{_attr("src", config.services_ref)}></script>\n')
    wr.w("</head>\n<body>\n<article class=\"document\">\n")
    front = next((c for c in tree.children if c.kind == "frontmatter"), None)
    wr.header(frontmatter, front.children if front is not None else [])
    wr.w("<main>\n")
    wr.blocks(body, 1)
    wr.w("</main>\n</article>\n</body>\n</html>\n")
    if not body:
        diags.append(warning("empty-document", "document body is empty"))
    head = {"title": title, "authors": authors}
    return PageAssembly("".join(wr.out), config.theme_ref, config.services_ref, head, diags)


# -- text extraction, used by the preservation checks --

class _TextExtractor(HTMLParser):
    def __init__(self, math_as_tex: bool):
        super().__init__(convert_charrefs=True)
        self.math_as_tex = math_as_tex
        self.parts: List[str] = []
        self.skip = 0
        self.in_body = False
        self.stack: List[bool] = []
        self.math_depth = 0
        self.in_annotation = False

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "body":
            self.in_body = True
        if tag in ("br",):
            self.parts.append(" ")
            return
        gen = "gen" in (a.get("class") or "").split()
        self.stack.append(gen)
        if gen:
            self.skip += 1
        if tag == "math":
            self.math_depth += 1
        if tag == "annotation":
            self.in_annotation = True
        if tag in BLOCK_TAGS:
            self.parts.append(" ")

    def handle_startendtag(self, tag, attrs):
        if tag in BLOCK_TAGS:
            self.parts.append(" ")

    def handle_endtag(self, tag):
        if tag in ("br",):
            return
        if tag == "annotation":
            self.in_annotation = False
        if tag == "math":
            self.math_depth -= 1
        if self.stack and self.stack.pop():
            self.skip -= 1
        if tag in BLOCK_TAGS:
            self.parts.append(" ")

    def handle_data(self, data):
        if not self.in_body or self.skip:
            return
        if self.math_depth:
            if self.math_as_tex and self.in_annotation:
                self.parts.append(data)
            elif not self.math_as_tex and not self.in_annotation:
                self.parts.append(data)
            return
        self.parts.append(data)


def page_text(html: str, *, math_as_tex: bool = True) -> str:
    """Visible body text with generated text removed and whitespace collapsed.

    Math elements contribute their TeX annotation (or, with ``math_as_tex``
    false, their presentation token text).
    """
    p = _TextExtractor(math_as_tex)
    p.feed(html)
    p.close()
    return " ".join("".join(p.parts).split())


BLOCK_KINDS = {"document", "frontmatter", "section", "heading", "paragraph", "list", "list-item",
               "block", "equation", "equation-group", "table-fallback", "table-row", "table-cell",
               "field"}


def tree_text(tree: DocNode) -> str:
    """Authored text of a document tree in page order, whitespace collapsed."""
    parts: List[str] = []

    def visit(n: DocNode) -> None:
        if n.kind == "frontmatter":
            groups = front_order(n.children)
            titles = groups["title"][:1]
            affs: Dict[str, DocNode] = {}
            for f in groups["affiliation"]:
                affs[str(f.attrs.get("key"))] = f
            for f in titles + groups["author"] + list(affs.values()) + groups["other"]:
                visit(f)
            return
        block = n.kind in BLOCK_KINDS or (n.kind in ("fallback-blob", "code") and n.attrs.get("display") == "block")
        if block:
            parts.append(" ")
        if n.kind in ("text-run", "math", "fallback-blob", "code"):
            parts.append(n.text_content())
        elif n.kind == "cite":
            parts.extend(str(k) for k in n.attrs.get("keys", []))
        else:
            for c in n.children:
                visit(c)
        if block:
            parts.append(" ")

    visit(tree)
    return " ".join("".join(parts).split())
