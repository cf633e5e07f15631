"""One-time conversion of the stock frontal-face model to the legacy schema.

The upstream distribution ships the model in the newer cascade container
(stageType BOOST / featureType HAAR with internalNodes + leafValues). This
package speaks only the old-style schema, so this tool rewrites the model
once, keeps the original license comment block, and drops the result into
src/sentinel/data/. Run from the repository root:

    python3 tools/convert_stock_model.py <stock-new-format.xml>
"""

import pathlib
import re
import sys
import xml.etree.ElementTree as ET

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from sentinel.cascade_xml import parse_cascade, serialize_cascade
from sentinel.haar import Cascade, HaarFeature, Leaf, Stage, WeakNode
from sentinel.imaging import Rect

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "sentinel" / "data" / "frontal_face.xml"


def convert(src_path: str) -> bytes:
    raw = pathlib.Path(src_path).read_text()
    license_match = re.search(r"<!--.*?-->", raw, re.DOTALL)
    license_block = license_match.group(0) if license_match else ""

    root = ET.fromstring(raw)
    casc = root.find("cascade")
    assert casc is not None and casc.get("type_id") == "opencv-cascade-classifier"
    assert casc.findtext("stageType") == "BOOST"
    assert casc.findtext("featureType") == "HAAR"
    width = int(casc.findtext("width"))
    height = int(casc.findtext("height"))

    features = []
    for feat in casc.find("features"):
        rects = []
        for r in feat.find("rects"):
            parts = r.text.split()
            x, y, w, h = (int(p) for p in parts[:4])
            rects.append((Rect(x, y, w, h), float(parts[4])))
        tilted = feat.findtext("tilted")
        assert tilted is None or int(tilted) == 0, "tilted features not supported"
        features.append(tuple(rects))

    stages = []
    for st in casc.find("stages"):
        stage_threshold = float(st.findtext("stageThreshold"))
        trees = []
        for weak in st.find("weakClassifiers"):
            internal = weak.findtext("internalNodes").split()
            leaves = [float(v) for v in weak.findtext("leafValues").split()]
            # stumps only: one internal node "left right featureIdx threshold"
            # with negative left/right selecting leafValues[-v-1]
            assert len(internal) == 4 and len(leaves) == 2, "expected a stump"
            left_sel, right_sel, feat_idx, thr = (
                int(internal[0]),
                int(internal[1]),
                int(internal[2]),
                float(internal[3]),
            )
            assert left_sel == 0 and right_sel == -1
            node = WeakNode(
                HaarFeature(features[feat_idx]),
                thr,
                Leaf(leaves[0]),
                Leaf(leaves[1]),
            )
            trees.append((node,))
        stages.append(Stage(tuple(trees), stage_threshold))

    cascade = Cascade(width, height, tuple(stages))
    # printing reals at 10 significant digits nudges the last bits once;
    # canonicalize through one round-trip so the bundled file is a fixed point
    canonical = parse_cascade(serialize_cascade(cascade))
    body = serialize_cascade(canonical)

    # keep the original license/attribution comment right after the declaration
    text = body.decode()
    decl, rest = text.split("\n", 1)
    out = (decl + "\n" + license_block + "\n" + rest).encode()

    reparsed = parse_cascade(out)
    assert reparsed == canonical, "converted file must reload to the same cascade"
    return out


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    data = convert(sys.argv[1])
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_bytes(data)
    c = parse_cascade(data)
    stumps = sum(len(s.trees) for s in c.stages)
    print(f"wrote {OUT} ({len(data)} bytes): {c.window_w}x{c.window_h}, "
          f"{len(c.stages)} stages, {stumps} stumps")


if __name__ == "__main__":
    main()
