"""Cascade classifier evaluation and multi-scale face detection.

A Cascade is an ordered list of stages; each stage sums the outputs of small
decision trees over Haar features and rejects the window early when the sum
falls below the stage threshold. Detection slides the window over a single
integral image at a ladder of scales (features are scaled, the image is not)
and fuses overlapping hits with union-find grouping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import (
    GrayImage,
    IntegralImage,
    Rect,
    SquaredIntegralImage,
    integral,
    rect_sum,
    window_stddev,
)

# Below this the window is treated as flat and sigma is pinned to 1.
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class Leaf:
    """Terminal tree output."""

    value: float


@dataclass(frozen=True)
class HaarFeature:
    """Weighted rectangles in base-window coordinates; 2 or 3 of them."""

    rects: tuple[tuple[Rect, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "rects", tuple((r, float(w)) for r, w in self.rects))
        if not 2 <= len(self.rects) <= 3:
            raise ValueError(f"feature needs 2 or 3 rects, got {len(self.rects)}")
        weights = [w for _, w in self.rects]
        if any(w == 0 for w in weights):
            raise ValueError("feature weights must be nonzero")
        if not (any(w > 0 for w in weights) and any(w < 0 for w in weights)):
            raise ValueError("feature needs both positive and negative weights")

    def fits(self, window_w: int, window_h: int) -> bool:
        return all(r.inside(window_w, window_h) for r, _ in self.rects)


@dataclass(frozen=True)
class WeakNode:
    """One split: compare the feature value against threshold, go left when
    strictly below, right otherwise. Each side is a Leaf or a child index."""

    feature: HaarFeature
    threshold: float
    left: Leaf | int
    right: Leaf | int


Tree = tuple[WeakNode, ...]


def _check_tree(trees_idx: int, tree: Tree) -> None:
    n = len(tree)
    if n == 0:
        raise ValueError(f"tree {trees_idx}: empty")
    seen = set()

    def walk(i):
        if not 0 <= i < n:
            raise ValueError(f"tree {trees_idx}: child index {i} out of range")
        if i in seen:
            raise ValueError(f"tree {trees_idx}: node {i} reachable twice (cycle or share)")
        seen.add(i)
        node = tree[i]
        for side in (node.left, node.right):
            if not isinstance(side, Leaf):
                walk(side)

    walk(0)


@dataclass(frozen=True)
class Stage:
    trees: tuple[Tree, ...]
    stage_threshold: float

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(tuple(t) for t in self.trees))
        if not self.trees:
            raise ValueError("stage needs at least one tree")
        for i, t in enumerate(self.trees):
            _check_tree(i, t)


@dataclass(frozen=True)
class Cascade:
    window_w: int
    window_h: int
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.window_w < 4 or self.window_h < 4:
            raise ValueError(f"window must be at least 4x4, got {self.window_w}x{self.window_h}")
        if not self.stages:
            raise ValueError("cascade needs at least one stage")
        for si, stage in enumerate(self.stages):
            for ti, tree in enumerate(stage.trees):
                for node in tree:
                    if not node.feature.fits(self.window_w, self.window_h):
                        raise ValueError(f"stage {si} tree {ti}: feature rect outside window")


@dataclass(frozen=True)
class DetectParams:
    scale_factor: float = 1.1
    min_neighbors: int = 4
    min_size: int = 0  # 0 means the cascade base window
    step_fraction: float = 0.05

    def __post_init__(self):
        if not self.scale_factor > 1.0:
            raise ValueError("scale_factor must be > 1.0")
        if self.min_neighbors < 0:
            raise ValueError("min_neighbors must be >= 0")
        if not 0 < self.step_fraction:
            raise ValueError("step_fraction must be positive")


def scale_rect(r: Rect, scale: float) -> Rect:
    return Rect(round(r.x * scale), round(r.y * scale), round(r.w * scale), round(r.h * scale))


def _scaled_weights(f: HaarFeature, scale: float) -> list[float]:
    """Rect weights to use at this scale.

    Features whose weighted areas cancel in base coordinates keep that
    cancellation after coordinate rounding: the first rect's weight is
    recomputed from the others' rounded areas. Identity at scale 1.
    """
    weights = [w for _, w in f.rects]
    if abs(sum(w * r.area for r, w in f.rects)) > 1e-9:
        return weights
    scaled = [scale_rect(r, scale) for r, _ in f.rects]
    rest = sum(w * sr.area for sr, (_, w) in zip(scaled[1:], list(f.rects)[1:]))
    weights[0] = -rest / scaled[0].area
    return weights


def eval_feature(
    f: HaarFeature,
    ii: IntegralImage,
    origin: tuple[int, int],
    scale: float,
    window_area: float,
    sigma: float,
) -> float:
    """Normalized weighted rect-sum of the feature at the given window."""
    ox, oy = origin
    weights = _scaled_weights(f, scale)
    total = 0.0
    for (r, _), w in zip(f.rects, weights):
        sr = scale_rect(r, scale)
        total += w * rect_sum(ii, Rect(ox + sr.x, oy + sr.y, sr.w, sr.h))
    return total / (window_area * sigma)


def _norm_rect(c: Cascade, origin: tuple[int, int], scale: float) -> Rect:
    # variance is measured over the window inset by one base pixel per side
    q = round(scale)
    return Rect(
        origin[0] + q,
        origin[1] + q,
        round((c.window_w - 2) * scale),
        round((c.window_h - 2) * scale),
    )


def _eval_tree(
    tree: Tree,
    ii: IntegralImage,
    origin: tuple[int, int],
    scale: float,
    area: float,
    sigma: float,
) -> float:
    idx = 0
    while True:
        node = tree[idx]
        v = eval_feature(node.feature, ii, origin, scale, area, sigma)
        branch = node.left if v < node.threshold else node.right
        if isinstance(branch, Leaf):
            return branch.value
        idx = branch


def eval_window(
    c: Cascade,
    ii: IntegralImage,
    sq: SquaredIntegralImage,
    origin: tuple[int, int],
    scale: float = 1.0,
) -> bool:
    """Run the full attentional cascade on one window; True means accepted."""
    nr = _norm_rect(c, origin, scale)
    sigma = window_stddev(ii, sq, nr)
    if sigma < SIGMA_FLOOR:
        sigma = 1.0
    area = float(nr.area)
    for stage in c.stages:
        total = 0.0
        for tree in stage.trees:
            total += _eval_tree(tree, ii, origin, scale, area, sigma)
        if total < stage.stage_threshold:
            return False
    return True


# ----------------------------------------------------------- vectorized scan


class _FlatCascade:
    """Cascade flattened into arrays for bulk window evaluation.

    Nodes of every tree are concatenated; child links become global node
    indices, leaves become negative codes into a value pool.
    """

    def __init__(self, c: Cascade):
        self.cascade = c
        thresholds = []
        base_rects = []  # (x, y, w, h) triples per node, padded to 3 rects
        base_weights = []
        balanced = []
        left_code = []
        right_code = []
        leaf_pool = [0.0]  # index 0 unused so codes can be strictly negative
        self.stage_slices = []
        self.stage_thresholds = np.array([s.stage_threshold for s in c.stages])
        self.tree_roots = []  # per stage: list of root node global indices

        for stage in c.stages:
            roots = []
            for tree in stage.trees:
                base = len(thresholds)
                roots.append(base)
                for node in tree:
                    thresholds.append(node.threshold)
                    rects = [(r.x, r.y, r.w, r.h) for r, _ in node.feature.rects]
                    weights = [w for _, w in node.feature.rects]
                    while len(rects) < 3:
                        rects.append((0, 0, 1, 1))
                        weights.append(0.0)
                    base_rects.append(rects)
                    base_weights.append(weights)
                    balanced.append(
                        abs(sum(w * r.area for r, w in node.feature.rects)) <= 1e-9
                    )
                    codes = []
                    for side in (node.left, node.right):
                        if isinstance(side, Leaf):
                            leaf_pool.append(side.value)
                            codes.append(-(len(leaf_pool) - 1))
                        else:
                            codes.append(base + side)
                    left_code.append(codes[0])
                    right_code.append(codes[1])
            self.tree_roots.append(np.array(roots, dtype=np.int64))

        self.thresholds = np.array(thresholds)
        self.base_rects = np.array(base_rects, dtype=np.float64)  # (n, 3, 4)
        self.base_weights = np.array(base_weights, dtype=np.float64)  # (n, 3)
        self.balanced = np.array(balanced, dtype=bool)
        self.left_code = np.array(left_code, dtype=np.int64)
        self.right_code = np.array(right_code, dtype=np.int64)
        self.leaf_pool = np.array(leaf_pool)

    def at_scale(self, scale: float, table_stride: int):
        """Corner offsets into the flat integral table, per-rect weights, and
        the largest (x+w, y+h) extent any scaled rect reaches."""
        r = np.round(self.base_rects * scale).astype(np.int64)  # (n, 3, 4)
        x, y, w, h = r[:, :, 0], r[:, :, 1], r[:, :, 2], r[:, :, 3]
        tl = y * table_stride + x
        tr = y * table_stride + (x + w)
        bl = (y + h) * table_stride + x
        br = (y + h) * table_stride + (x + w)
        weights = self.base_weights.copy()
        areas = (w * h).astype(np.float64)
        rest = (weights[:, 1:] * areas[:, 1:]).sum(axis=1)
        w0 = -rest / areas[:, 0]
        weights[self.balanced, 0] = w0[self.balanced]
        extent = int((x + w).max()), int((y + h).max())
        return np.stack([br, tr, bl, tl], axis=2), weights, extent


def _bulk_tree_values(
    flat: _FlatCascade,
    roots: np.ndarray,
    table: np.ndarray,
    bases: np.ndarray,
    offsets: np.ndarray,
    weights: np.ndarray,
    norm: np.ndarray,
) -> np.ndarray:
    """Evaluate one stage's trees for every window base; returns (n_win,) sums."""
    total = np.zeros(len(bases))
    for root in roots:
        cur = np.full(len(bases), root, dtype=np.int64)
        out = np.zeros(len(bases))
        live = np.arange(len(bases))
        while live.size:
            nodes = cur[live]
            off = offsets[nodes]  # (m, 3, 4)
            idx = bases[live, None, None] + off
            sums = table[idx]  # (m, 3, 4) corners br, tr, bl, tl
            rsum = sums[:, :, 0] - sums[:, :, 1] - sums[:, :, 2] + sums[:, :, 3]
            vals = (rsum * weights[nodes]).sum(axis=1) / norm[live]
            code = np.where(vals < flat.thresholds[nodes], flat.left_code[nodes], flat.right_code[nodes])
            leaf = code < 0
            out[live[leaf]] = flat.leaf_pool[-code[leaf]]
            cur[live[~leaf]] = code[~leaf]
            live = live[~leaf]
        total += out
    return total


def scan_windows(c: Cascade, img: GrayImage, p: DetectParams) -> list[Rect]:
    """All windows the cascade accepts, ungrouped, in (scale, y, x) order."""
    if img.width < c.window_w or img.height < c.window_h:
        return []
    ii, sq = integral(img)
    table = ii.table.ravel()
    sq_table = sq.table.ravel()
    stride = img.width + 1
    flat = _FlatCascade(c)
    min_size = p.min_size if p.min_size else min(c.window_w, c.window_h)

    out = []
    scale = 1.0
    while True:
        ww = round(c.window_w * scale)
        wh = round(c.window_h * scale)
        if ww > img.width or wh > img.height:
            break
        if min(ww, wh) >= min_size:
            out.extend(_scan_one_scale(c, flat, table, sq_table, stride, img, scale, ww, wh, p))
        scale *= p.scale_factor
    return out


def _scan_one_scale(c, flat, table, sq_table, stride, img, scale, ww, wh, p):
    step = max(1, round(p.step_fraction * scale * c.window_w))
    offsets, weights, extent = flat.at_scale(scale, stride)
    # coordinate rounding can push a scaled rect 1 px past the nominal window
    # edge; shrink the scan range so every table lookup stays in bounds
    reach_x = max(ww, extent[0])
    reach_y = max(wh, extent[1])
    xs = np.arange(0, img.width - reach_x + 1, step, dtype=np.int64)
    ys = np.arange(0, img.height - reach_y + 1, step, dtype=np.int64)
    if not len(xs) or not len(ys):
        return []
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    ox = gx.ravel()
    oy = gy.ravel()
    bases = oy * stride + ox

    # per-window sigma over the inset normalization rect
    q = round(scale)
    nw = round((c.window_w - 2) * scale)
    nh = round((c.window_h - 2) * scale)
    area = float(nw * nh)
    ntl = (oy + q) * stride + (ox + q)
    s1 = table[ntl + nh * stride + nw] - table[ntl + nw] - table[ntl + nh * stride] + table[ntl]
    s2 = sq_table[ntl + nh * stride + nw] - sq_table[ntl + nw] - sq_table[ntl + nh * stride] + sq_table[ntl]
    mean = s1 / area
    var = s2 / area - mean * mean
    sigma = np.sqrt(np.maximum(var, 0.0))
    sigma[sigma < SIGMA_FLOOR] = 1.0
    norm = area * sigma

    alive = np.arange(len(bases))
    for si in range(len(c.stages)):
        sums = _bulk_tree_values(
            flat, flat.tree_roots[si], table, bases[alive], offsets, weights, norm[alive]
        )
        alive = alive[sums >= flat.stage_thresholds[si]]
        if not alive.size:
            return []
    # meshgrid order is (y, x); report in (scale, y, x) order for determinism
    return [Rect(int(ox[i]), int(oy[i]), ww, wh) for i in alive]


def detect_multiscale(c: Cascade, img: GrayImage, p: DetectParams | None = None) -> list[Rect]:
    """Slide the cascade over the image at all scales and group the hits."""
    p = p or DetectParams()
    raw = scan_windows(c, img, p)
    return group_rectangles(raw, p.min_neighbors)


# ------------------------------------------------------------------- grouping


def _similar(a: Rect, b: Rect, eps: float) -> bool:
    if abs(a.x - b.x) > eps * 0.5 * (a.w + b.w):
        return False
    if abs(a.y - b.y) > eps * 0.5 * (a.h + b.h):
        return False
    if max(a.w, b.w) / min(a.w, b.w) > 1 + eps:
        return False
    return max(a.h, b.h) / min(a.h, b.h) <= 1 + eps


def group_rectangles(raw: list[Rect], min_neighbors: int, eps: float = 0.2) -> list[Rect]:
    """Cluster similar rects (union-find) and keep clusters with enough support.

    Each surviving cluster becomes its component-wise rounded mean rect,
    reported in first-member order.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must be in (0, 1)")
    n = len(raw)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _similar(raw[i], raw[j], eps):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    clusters: dict[int, list[Rect]] = {}
    order = []
    for i, r in enumerate(raw):
        root = find(i)
        if root not in clusters:
            clusters[root] = []
            order.append(root)
        clusters[root].append(r)

    need = max(1, min_neighbors)
    out = []
    for root in order:
        members = clusters[root]
        if len(members) < need:
            continue
        k = len(members)
        out.append(
            Rect(
                round(sum(m.x for m in members) / k),
                round(sum(m.y for m in members) / k),
                round(sum(m.w for m in members) / k),
                round(sum(m.h for m in members) / k),
            )
        )
    return out
