"""Build the frozen single-window verdict fixture for the bundled cascade.

Cuts 24x24 patches from the sample photos (face crops resized down, plus
random background patches), asks an independent reference implementation for
accept/reject verdicts on each, and freezes patches + verdicts into
tests/assets/windows/.

Getting a single-window verdict out of the reference takes a trick: its
multi-scale scanner skips images at or near the base window size entirely, so
each patch is pasted at (2, 2) on a flat 100x100 canvas and the reference is
run with min_neighbors 0; the window verdict is whether the exact raw rect
(2, 2, 24, 24) shows up. Variance normalization only reads pixels inside the
window, so the canvas verdict equals the bare-window verdict. The (2, 2)
offset keeps the window on the scanner's stride-2 grid.

Patches whose stage sums sit within 1e-4 of a stage threshold are discarded:
reference implementations bias stage thresholds by up to 1e-4 at load time,
so verdicts inside that band are not comparable across implementations.

Requires node and the reference runner (tools/refdetect.js). Run:

    python3 tools/freeze_window_oracle.py <photo-dir>
"""

import json
import pathlib
import subprocess
import sys
import tempfile

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from sentinel.cascade_xml import load_cascade
from sentinel.haar import Leaf, eval_feature
from sentinel.imaging import (
    GrayImage,
    Rect,
    crop,
    integral,
    read_image,
    resize_bilinear,
    window_stddev,
    write_image,
)

ROOT = pathlib.Path(__file__).resolve().parents[1]
OUT = ROOT / "tests" / "assets" / "windows"
CASCADE = ROOT / "src" / "sentinel" / "data" / "frontal_face.xml"
MARGIN = 1e-4


def stage_margins(c, img: GrayImage) -> tuple[bool, float]:
    """Full-evaluation verdict plus the smallest |stage sum - threshold|
    over the stages actually reached."""
    ii, sq = integral(img)
    nr = Rect(1, 1, c.window_w - 2, c.window_h - 2)
    sigma = window_stddev(ii, sq, nr)
    if sigma < 1e-6:
        sigma = 1.0
    area = float(nr.area)
    worst = float("inf")
    for stage in c.stages:
        total = 0.0
        for tree in stage.trees:
            idx = 0
            while True:
                node = tree[idx]
                v = eval_feature(node.feature, ii, (0, 0), 1.0, area, sigma)
                branch = node.left if v < node.threshold else node.right
                if isinstance(branch, Leaf):
                    total += branch.value
                    break
                idx = branch
        worst = min(worst, abs(total - stage.stage_threshold))
        if total < stage.stage_threshold:
            return False, worst
    return True, worst


def collect_patches(photo_dir: pathlib.Path, c) -> dict[str, GrayImage]:
    patches = {}
    face_boxes = {
        # reference detections on the sample photos (see curate_photos.py)
        "astronaut.pgm": Rect(174, 65, 95, 95),
        "lfw000_x4.pgm": Rect(9, 3, 76, 76),
        "lfw005_x4.pgm": Rect(4, 5, 73, 73),
        "lfw010_x4.pgm": Rect(4, 5, 77, 77),
        "lfw020_x4.pgm": Rect(1, 2, 74, 74),
        "lfw040_x4.pgm": Rect(2, 7, 70, 70),
        "lfw080_x4.pgm": Rect(5, 5, 78, 78),
        "lfw090_x4.pgm": Rect(9, 5, 75, 75),
    }
    for name, box in face_boxes.items():
        p = photo_dir / name
        if not p.exists():
            continue
        img = read_image(p)
        patches[f"face_{name[:-4]}"] = resize_bilinear(crop(img, box), c.window_w, c.window_h)
        # offset windows near the face: usually rejected, occasionally not
        for dx, dy, tag in ((box.w // 3, 0, "offx"), (0, box.h // 3, "offy")):
            shifted = Rect(box.x + dx, box.y + dy, box.w, box.h)
            if shifted.inside(img.width, img.height):
                patches[f"near_{name[:-4]}_{tag}"] = resize_bilinear(
                    crop(img, shifted), c.window_w, c.window_h
                )

    rng = np.random.default_rng(20240817)
    for name in ("brick.pgm", "grass.pgm", "text.pgm", "page.pgm", "coins.pgm", "moon.pgm"):
        p = photo_dir / name
        if not p.exists():
            continue
        img = read_image(p)
        for i in range(8):
            x = int(rng.integers(0, img.width - c.window_w + 1))
            y = int(rng.integers(0, img.height - c.window_h + 1))
            patches[f"bg_{name[:-4]}_{i}"] = crop(img, Rect(x, y, c.window_w, c.window_h))
    return patches


def reference_verdicts(patches: dict[str, GrayImage], window: int) -> dict[str, bool]:
    with tempfile.TemporaryDirectory() as td:
        tdp = pathlib.Path(td)
        for name, img in patches.items():
            canvas = np.full((100, 100), 128, dtype=np.uint8)
            canvas[2 : 2 + window, 2 : 2 + window] = img.pixels
            write_image(GrayImage(canvas), tdp / f"{name}.pgm")
        files = sorted(tdp.glob("*.pgm"))
        raw = subprocess.run(
            ["node", str(ROOT / "tools" / "refdetect.js"), "1.1", "0", *map(str, files)],
            capture_output=True,
            text=True,
            check=True,
        ).stdout
    hits = json.loads(raw)
    return {
        k[:-4]: any(r[:4] == [2, 2, window, window] for r in v) for k, v in hits.items()
    }


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    photo_dir = pathlib.Path(sys.argv[1])
    c = load_cascade(CASCADE)
    patches = collect_patches(photo_dir, c)

    kept = {}
    dropped = 0
    for name, img in sorted(patches.items()):
        verdict, margin = stage_margins(c, img)
        if margin <= MARGIN:
            dropped += 1
            continue
        kept[name] = (img, verdict)

    ref = reference_verdicts({n: img for n, (img, _) in kept.items()}, c.window_w)
    mismatches = [n for n, (_, v) in kept.items() if v != ref[n]]
    if mismatches:
        sys.exit(f"verdict mismatch vs reference on: {mismatches}")

    OUT.mkdir(parents=True, exist_ok=True)
    for old in OUT.glob("*.pgm"):
        old.unlink()
    for name, (img, _) in kept.items():
        write_image(img, OUT / f"{name}.pgm")
    accepts = sum(v for _, v in kept.values())
    (OUT / "verdicts.json").write_text(json.dumps(ref, indent=1, sort_keys=True) + "\n")
    print(f"froze {len(kept)} windows ({accepts} accepted, {len(kept)-accepts} rejected, "
          f"{dropped} dropped for thin margins); reference agrees on all")


if __name__ == "__main__":
    main()
