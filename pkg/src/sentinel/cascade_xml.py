"""Reader and writer for the old-style Haar cascade XML model format.

The format is the one stock frontal-face model files use: an opencv_storage
root, a named cascade element with type_id "opencv-haar-classifier", a
<size> element, and nested anonymous <_> elements for stages, trees, and
nodes. The parser here is deliberately narrow: it understands exactly the
elements this schema uses (plus comments and an XML declaration) and nothing
else. Serialization is canonical, so serialize(parse(x)) is a fixed point.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .haar import Cascade, HaarFeature, Leaf, Stage, WeakNode
from .imaging import Rect


class CascadeParseError(ValueError):
    """Malformed XML; message carries a line number."""


class CascadeValidationError(ValueError):
    """Well-formed XML that violates the cascade schema."""


@dataclass
class _Element:
    name: str
    attrs: dict[str, str]
    children: list["_Element"] = field(default_factory=list)
    text: str = ""
    pos: int = 0  # source offset; line numbers derived lazily on error


# One scan tokenizes the whole document at C speed; a token-driven descent
# then builds the element tree. Alternatives, in order: comment, declaration,
# closing tag, opening tag (attributes as an uninterpreted blob), text run.
_TOKEN = re.compile(
    r"(?P<comment><!--.*?-->)"
    r"|(?P<decl><\?.*?\?>)"
    r"|(?P<close></\s*(?P<cname>[\w.-]+)\s*>)"
    r"|(?P<open><(?P<oname>[\w.-]+)(?P<attrs>(?:[^>\"']|\"[^\"]*\"|'[^']*')*?)(?P<selfclose>/?)>)"
    r"|(?P<text>[^<]+)",
    re.DOTALL,
)

_ATTR = re.compile(r"([\w.-]+)\s*=\s*(\"[^\"]*\"|'[^']*')")

_ENTITIES = (("&lt;", "<"), ("&gt;", ">"), ("&quot;", '"'), ("&apos;", "'"), ("&amp;", "&"))


def _unescape(s: str) -> str:
    if "&" not in s:
        return s
    for ent, ch in _ENTITIES:
        s = s.replace(ent, ch)
    return s


class _Parser:
    """Minimal XML reader: elements, attributes, text, comments, declaration.

    No namespaces, entities beyond the five predefined ones, CDATA, or DTDs.
    """

    def __init__(self, data: bytes):
        try:
            self.src = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CascadeParseError(f"not valid UTF-8: {e}") from None

    def _line(self, pos: int) -> int:
        return self.src.count("\n", 0, pos) + 1

    def _error(self, pos: int, msg: str):
        raise CascadeParseError(f"line {self._line(pos)}: {msg}")

    def parse_document(self) -> _Element:
        root = None
        # stack entries: [element, text_parts]
        stack: list[list] = []
        pos = 0
        src = self.src
        for m in _TOKEN.finditer(src):
            if m.start() != pos:
                self._error(pos, "malformed markup")
            pos = m.end()
            kind = m.lastgroup
            if kind in ("comment", "decl"):
                continue
            if kind == "text":
                txt = m.group("text")
                if stack:
                    stack[-1][1].append(txt)
                elif txt.strip():
                    self._error(m.start(), "text outside document root")
                continue
            if root is not None and not stack:
                self._error(m.start(), "content after document root")
            if kind == "open":
                attrs_blob = m.group("attrs")
                attrs = {}
                if attrs_blob.strip():
                    leftover = _ATTR.sub("", attrs_blob).strip()
                    if leftover:
                        self._error(m.start(), f"malformed attributes {leftover!r}")
                    for am in _ATTR.finditer(attrs_blob):
                        attrs[am.group(1)] = _unescape(am.group(2)[1:-1])
                elem = _Element(m.group("oname"), attrs, pos=m.start())
                if m.group("selfclose"):
                    if stack:
                        stack[-1][0].children.append(elem)
                    else:
                        root = elem
                else:
                    stack.append([elem, []])
                continue
            # closing tag
            if not stack:
                self._error(m.start(), f"unmatched closing tag </{m.group('cname')}>")
            elem, text_parts = stack.pop()
            if elem.name != m.group("cname"):
                self._error(m.start(), f"<{elem.name}> closed by </{m.group('cname')}>")
            elem.text = _unescape("".join(text_parts)).strip()
            if stack:
                stack[-1][0].children.append(elem)
            else:
                root = elem
        if pos != len(src):
            self._error(pos, "malformed markup")
        if stack:
            self._error(len(src) - 1, f"<{stack[-1][0].name}> never closed")
        if root is None:
            self._error(0, "expected element")
        return root


# ------------------------------------------------------------- interpretation


def _only_child(e: _Element, name: str, where: str) -> _Element:
    found = [c for c in e.children if c.name == name]
    if len(found) != 1:
        raise CascadeValidationError(f"{where}: expected exactly one <{name}>, found {len(found)}")
    return found[0]


def _opt_child(e: _Element, name: str) -> _Element | None:
    found = [c for c in e.children if c.name == name]
    return found[0] if len(found) == 1 else None


def _anon(e: _Element) -> list[_Element]:
    return [c for c in e.children if c.name == "_"]


def _real(e: _Element, where: str) -> float:
    try:
        return float(e.text)
    except ValueError:
        raise CascadeValidationError(f"{where}: bad real value {e.text!r}") from None


def _int(e: _Element, where: str) -> int:
    try:
        return int(e.text)
    except ValueError:
        raise CascadeValidationError(f"{where}: bad integer value {e.text!r}") from None


def _parse_rect_line(text: str, where: str) -> tuple[Rect, float]:
    parts = text.split()
    if len(parts) != 5:
        raise CascadeValidationError(f"{where}: rect needs 'x y w h weight', got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts[:4])
        weight = float(parts[4])
    except ValueError:
        raise CascadeValidationError(f"{where}: bad rect tokens {text!r}") from None
    try:
        rect = Rect(x, y, w, h)
    except ValueError as e:
        raise CascadeValidationError(f"{where}: {e}") from None
    return rect, weight


def _parse_node(e: _Element, where: str) -> tuple[WeakNode, int | None, int | None]:
    """Returns the node plus raw child indices (None when that side is a leaf)."""
    feat_el = _only_child(e, "feature", where)
    rects_el = _only_child(feat_el, "rects", where)
    rects = [_parse_rect_line(r.text, where) for r in _anon(rects_el)]
    tilted = _opt_child(feat_el, "tilted")
    if tilted is not None and _int(tilted, where) != 0:
        raise CascadeValidationError(f"{where}: tilted features are not supported")
    try:
        feature = HaarFeature(tuple(rects))
    except ValueError as err:
        raise CascadeValidationError(f"{where}: {err}") from None
    thr_el = _opt_child(e, "threshold")
    if thr_el is None:
        raise CascadeValidationError(f"{where}: node missing <threshold>")
    threshold = _real(thr_el, where)

    sides: list[Leaf | int] = []
    raw_links: list[int | None] = []
    for side in ("left", "right"):
        val = _opt_child(e, f"{side}_val")
        node = _opt_child(e, f"{side}_node")
        if (val is None) == (node is None):
            raise CascadeValidationError(f"{where}: need exactly one of <{side}_val>/<{side}_node>")
        if val is not None:
            sides.append(Leaf(_real(val, where)))
            raw_links.append(None)
        else:
            idx = _int(node, where)
            sides.append(idx)
            raw_links.append(idx)
    return WeakNode(feature, threshold, sides[0], sides[1]), raw_links[0], raw_links[1]


def _parse_tree(e: _Element, where: str) -> tuple[WeakNode, ...]:
    node_els = _anon(e)
    if not node_els:
        raise CascadeValidationError(f"{where}: tree has no nodes")
    nodes = []
    for i, ne in enumerate(node_els):
        node, left_idx, right_idx = _parse_node(ne, f"{where} node {i}")
        for idx in (left_idx, right_idx):
            if idx is not None and not 0 <= idx < len(node_els):
                raise CascadeValidationError(f"{where} node {i}: child index {idx} out of range")
        nodes.append(node)
    return tuple(nodes)


def parse_cascade(data: bytes) -> Cascade:
    """Parse legacy cascade XML bytes into a Cascade."""
    root = _Parser(data).parse_document()
    if root.name != "opencv_storage":
        raise CascadeValidationError(f"root element is <{root.name}>, expected <opencv_storage>")
    cascades = [c for c in root.children if c.attrs.get("type_id") == "opencv-haar-classifier"]
    if len(cascades) != 1:
        raise CascadeValidationError(
            f"expected exactly one opencv-haar-classifier element, found {len(cascades)}"
        )
    doc = cascades[0]
    size_el = _only_child(doc, "size", "cascade")
    size_parts = size_el.text.split()
    if len(size_parts) != 2:
        raise CascadeValidationError(f"cascade: bad <size> {size_el.text!r}")
    try:
        window_w, window_h = int(size_parts[0]), int(size_parts[1])
    except ValueError:
        raise CascadeValidationError(f"cascade: bad <size> {size_el.text!r}") from None

    stages = []
    stages_el = _only_child(doc, "stages", "cascade")
    for si, stage_el in enumerate(_anon(stages_el)):
        where = f"stage {si}"
        trees_el = _only_child(stage_el, "trees", where)
        trees = [_parse_tree(t, f"{where} tree {ti}") for ti, t in enumerate(_anon(trees_el))]
        thr_el = _opt_child(stage_el, "stage_threshold")
        if thr_el is None:
            raise CascadeValidationError(f"{where}: missing <stage_threshold>")
        try:
            stages.append(Stage(tuple(trees), _real(thr_el, where)))
        except ValueError as e:
            raise CascadeValidationError(f"{where}: {e}") from None

    try:
        return Cascade(window_w, window_h, tuple(stages))
    except ValueError as e:
        raise CascadeValidationError(str(e)) from None


# --------------------------------------------------------------- serialization


def _fmt_real(v: float) -> str:
    # up to 10 significant digits; integral values keep a trailing dot the way
    # stock files write them
    s = f"{v:.10g}"
    if "e" not in s and "." not in s and "inf" not in s and "nan" not in s:
        s += "."
    return s


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def serialize_cascade(c: Cascade) -> bytes:
    """Write a Cascade as canonical legacy XML."""
    out = ['<?xml version="1.0"?>', "<opencv_storage>", '<cascade type_id="opencv-haar-classifier">']
    out.append(f"  <size>{c.window_w} {c.window_h}</size>")
    out.append("  <stages>")
    for stage in c.stages:
        out.append("    <_>")
        out.append("      <trees>")
        for tree in stage.trees:
            out.append("        <_>")
            for node in tree:
                out.append("          <_>")
                out.append("            <feature>")
                out.append("              <rects>")
                for rect, weight in node.feature.rects:
                    out.append(
                        f"                <_>{rect.x} {rect.y} {rect.w} {rect.h} {_fmt_real(weight)}</_>"
                    )
                out.append("              </rects>")
                out.append("              <tilted>0</tilted>")
                out.append("            </feature>")
                out.append(f"            <threshold>{_fmt_real(node.threshold)}</threshold>")
                for label, side in (("left", node.left), ("right", node.right)):
                    if isinstance(side, Leaf):
                        out.append(f"            <{label}_val>{_fmt_real(side.value)}</{label}_val>")
                    else:
                        out.append(f"            <{label}_node>{side}</{label}_node>")
                out.append("          </_>")
            out.append("        </_>")
        out.append("      </trees>")
        out.append(f"      <stage_threshold>{_fmt_real(stage.stage_threshold)}</stage_threshold>")
        out.append("      <parent>-1</parent>")
        out.append("      <next>-1</next>")
        out.append("    </_>")
    out.append("  </stages>")
    out.append("</cascade>")
    out.append("</opencv_storage>")
    out.append("")
    return "\n".join(out).encode("utf-8")


def load_cascade(path) -> Cascade:
    with open(path, "rb") as f:
        return parse_cascade(f.read())


_frontal_face_cache: Cascade | None = None


def load_frontal_face() -> Cascade:
    """The stock frontal-face model shipped with the package (parsed once)."""
    global _frontal_face_cache
    if _frontal_face_cache is None:
        from importlib import resources

        data = (resources.files("sentinel") / "data" / "frontal_face.xml").read_bytes()
        _frontal_face_cache = parse_cascade(data)
    return _frontal_face_cache


def save_cascade(c: Cascade, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_cascade(c))
