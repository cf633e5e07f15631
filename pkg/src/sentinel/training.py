"""Cascade training: feature generation, AdaBoost over decision stumps,
stage-threshold adjustment, and attentional-cascade assembly with negative
bootstrapping.

Feature values during training come from the same normalized evaluation the
detector uses, so an emitted cascade reproduces its training-time decisions
when run through the detection path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .haar import Cascade, HaarFeature, Leaf, Stage, WeakNode
from .imaging import GrayImage, Rect, crop, integral, read_image, to_grayscale

# Emitted models are defined at serialization precision (10 significant
# digits), and stage thresholds get this much slack so that window scores
# recomputed through any evaluation order stay on the trained side.
_THETA_MARGIN = 1e-6


@dataclass(frozen=True)
class Sample:
    window: GrayImage
    label: int  # +1 face, -1 background

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be +1 or -1, got {self.label}")


@dataclass(frozen=True)
class Stump:
    """Weak learner: feature value < threshold goes left, else right; the
    polarity says which side predicts +1."""

    feature_index: int
    threshold: float
    left: int  # +1 or -1
    right: int


@dataclass(frozen=True)
class StrongClassifier:
    stumps: tuple[Stump, ...]
    alphas: tuple[float, ...]
    theta: float

    def score_matrix(self, values: np.ndarray) -> np.ndarray:
        """Scores for samples whose feature values are the (F, N) matrix rows."""
        total = np.zeros(values.shape[1])
        for stump, alpha in zip(self.stumps, self.alphas):
            v = values[stump.feature_index]
            total += alpha * np.where(v < stump.threshold, stump.left, stump.right)
        return total

    def predict_matrix(self, values: np.ndarray) -> np.ndarray:
        return self.score_matrix(values) >= self.theta


@dataclass(frozen=True)
class CascadeTargets:
    d_min: float = 0.99
    f_max: float = 0.5
    F_target: float = 0.125
    max_stages: int = 10
    max_stumps_per_stage: int = 40
    min_negatives: int = 20  # smallest pool worth training another stage on

    def __post_init__(self):
        if not 0 < self.d_min <= 1:
            raise ValueError("d_min must be in (0, 1]")
        if not 0 < self.f_max < 1:
            raise ValueError("f_max must be in (0, 1)")
        if not 0 < self.F_target < 1:
            raise ValueError("F_target must be in (0, 1)")
        if self.max_stages < 1 or self.max_stumps_per_stage < 1:
            raise ValueError("stage limits must be >= 1")
        if self.min_negatives < 1:
            raise ValueError("min_negatives must be >= 1")


class TrainingError(ValueError):
    pass


# ----------------------------------------------------------- feature catalog

# kind -> (width divisor, height divisor)
_KINDS = {
    "edge_h": (1, 2),
    "edge_v": (2, 1),
    "line_h": (1, 3),
    "line_v": (3, 1),
    "checker": (2, 2),
}


def _positive_rects(kind: str, x: int, y: int, w: int, h: int):
    if kind == "edge_h":
        return [(Rect(x, y, w, h // 2), 2.0)]
    if kind == "edge_v":
        return [(Rect(x, y, w // 2, h), 2.0)]
    if kind == "line_h":
        return [(Rect(x, y + h // 3, w, h // 3), 3.0)]
    if kind == "line_v":
        return [(Rect(x + w // 3, y, w // 3, h), 3.0)]
    # checker: two diagonal quarters at double weight balance the full rect
    return [(Rect(x, y, w // 2, h // 2), 2.0), (Rect(x + w // 2, y + h // 2, w // 2, h // 2), 2.0)]


def gen_features(window_w: int, window_h: int, stride: int = 1) -> list[HaarFeature]:
    """Every feature of the five standard kinds whose size divides evenly and
    whose position lands on the stride grid. Sizes step by kind-divisor times
    stride; positions step by stride."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for kind, (dx, dy) in _KINDS.items():
        for h in range(dy * stride, window_h + 1, dy * stride):
            for w in range(dx * stride, window_w + 1, dx * stride):
                for y in range(0, window_h - h + 1, stride):
                    for x in range(0, window_w - w + 1, stride):
                        rects = [(Rect(x, y, w, h), -1.0)] + _positive_rects(kind, x, y, w, h)
                        out.append(HaarFeature(tuple(rects)))
    return out


# ------------------------------------------------------------- value matrix


def feature_values(features: list[HaarFeature], samples: list[Sample]) -> np.ndarray:
    """(F, N) matrix of normalized feature values, computed exactly the way
    the detector evaluates windows (inset norm rect, sigma floor at 1)."""
    if not samples:
        return np.zeros((len(features), 0))
    w = samples[0].window.width
    h = samples[0].window.height
    for s in samples:
        if s.window.width != w or s.window.height != h:
            raise TrainingError("all sample windows must share one size")

    pairs = [integral(s.window) for s in samples]
    tables = np.stack([ii.table.ravel() for ii, _ in pairs])
    sq_tables = np.stack([sq.table.ravel() for _, sq in pairs])
    stride = w + 1

    nr = Rect(1, 1, w - 2, h - 2)
    tl = nr.y * stride + nr.x
    tr = nr.y * stride + nr.x + nr.w
    bl = (nr.y + nr.h) * stride + nr.x
    br = (nr.y + nr.h) * stride + nr.x + nr.w
    area = float(nr.area)
    s1 = tables[:, br] - tables[:, tr] - tables[:, bl] + tables[:, tl]
    s2 = sq_tables[:, br] - sq_tables[:, tr] - sq_tables[:, bl] + sq_tables[:, tl]
    mean = s1 / area
    sigma = np.sqrt(np.maximum(s2 / area - mean * mean, 0.0))
    sigma[sigma < 1e-6] = 1.0
    norm = area * sigma

    out = np.zeros((len(features), len(samples)))
    for fi, f in enumerate(features):
        total = np.zeros(len(samples))
        for r, weight in f.rects:
            tl = r.y * stride + r.x
            tr = r.y * stride + r.x + r.w
            bl = (r.y + r.h) * stride + r.x
            br = (r.y + r.h) * stride + r.x + r.w
            total += weight * (tables[:, br] - tables[:, tr] - tables[:, bl] + tables[:, tl])
        out[fi] = total / norm
    return out


def init_weights(labels: np.ndarray) -> np.ndarray:
    """Half the mass on each class, uniform within a class."""
    m = int((labels == 1).sum())
    l = int((labels == -1).sum())
    if m == 0 or l == 0:
        raise TrainingError("need at least one sample of each label")
    w = np.where(labels == 1, 1.0 / (2 * m), 1.0 / (2 * l))
    return w / w.sum()


# ----------------------------------------------------------------- best stump

# candidate cuts between values closer than this (relative) are merged;
# keeps thresholds robust to 10-digit serialization of the emitted model
_MERGE_EPS = 1e-9

_CHUNK = 2048  # features per block in the vectorized sweep


class _StumpSearch:
    """Per-training-set state reused across boosting rounds: sort order,
    candidate thresholds, and valid-cut masks for every feature row."""

    def __init__(self, values: np.ndarray, labels: np.ndarray):
        if values.ndim != 2 or values.shape[1] != len(labels):
            raise TrainingError("value matrix and labels disagree")
        if values.shape[0] == 0:
            raise TrainingError("no features to choose from")
        self.values = values
        self.order = np.argsort(values, axis=1, kind="stable")
        sv = np.take_along_axis(values, self.order, axis=1)
        n = values.shape[1]
        f = values.shape[0]
        self.thresholds = np.empty((f, n + 1))
        self.thresholds[:, 0] = sv[:, 0] - 1.0
        self.thresholds[:, n] = sv[:, n - 1] + 1.0
        if n > 1:
            self.thresholds[:, 1:n] = (sv[:, :-1] + sv[:, 1:]) / 2.0
        self.valid = np.ones((f, n + 1), dtype=bool)
        if n > 1:
            gap = sv[:, 1:] - sv[:, :-1]
            floor = _MERGE_EPS * np.maximum(np.maximum(np.abs(sv[:, 1:]), np.abs(sv[:, :-1])), 1e-30)
            self.valid[:, 1:n] = gap > floor
        self.pos_sorted = (labels[self.order] == 1)

    def best(self, weights: np.ndarray) -> tuple[Stump, float]:
        """Globally minimal weighted error over all cuts and both polarities.

        Ties break toward the lowest feature index, then the lowest
        threshold, then the left-positive polarity.
        """
        best_key = None
        best_stump_ = None
        for lo in range(0, self.values.shape[0], _CHUNK):
            hi = min(lo + _CHUNK, self.values.shape[0])
            wl = weights[self.order[lo:hi]]
            pm = np.where(self.pos_sorted[lo:hi], wl, 0.0)
            nm = wl - pm
            f = hi - lo
            n = wl.shape[1]
            cp = np.zeros((f, n + 1))
            cn = np.zeros((f, n + 1))
            np.cumsum(pm, axis=1, out=cp[:, 1:])
            np.cumsum(nm, axis=1, out=cn[:, 1:])
            tp = cp[:, -1:]
            tn = cn[:, -1:]
            # left side predicted +1: errors are negatives left of the cut
            # plus positives right of it; the other polarity mirrors that
            err = np.stack([cn + (tp - cp), cp + (tn - cn)], axis=2)
            err[~self.valid[lo:hi]] = np.inf
            flat = err.reshape(f, -1)
            # first argmin occurrence = smallest cut, then left-positive
            at = np.argmin(flat, axis=1)
            row_err = flat[np.arange(f), at]
            fi = int(np.argmin(row_err))
            key = (float(row_err[fi]), lo + fi)
            if best_key is None or key < best_key:
                k, pol = divmod(int(at[fi]), 2)
                left = 1 if pol == 0 else -1
                best_key = key
                best_stump_ = Stump(lo + fi, float(self.thresholds[lo + fi, k]), left, -left)
        return best_stump_, best_key[0]


def best_stump(
    values: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[Stump, float]:
    """One-shot stump search over the (F, N) value matrix under the weights."""
    return _StumpSearch(values, np.asarray(labels)).best(np.asarray(weights, dtype=float))


# -------------------------------------------------------------------- boosting


def adaboost_round(
    weights: np.ndarray, agreement: np.ndarray, epsilon: float
) -> tuple[float, np.ndarray]:
    """One weight update. agreement[i] = label_i * prediction_i (so +1 on
    correctly classified samples). Error 0.5 yields alpha 0; the caller treats
    that as the halt signal. Error is clamped below at 1e-10."""
    if epsilon > 0.5:
        raise TrainingError(f"weak learner worse than chance (error {epsilon})")
    eps = max(epsilon, 1e-10)
    alpha = 0.5 * math.log((1 - eps) / eps)
    w = weights * np.exp(-alpha * agreement)
    return alpha, w / w.sum()


def train_strong(
    values: np.ndarray, labels: np.ndarray, rounds: int
) -> StrongClassifier:
    """Discrete AdaBoost for up to `rounds` stumps over the value matrix.

    Stops early when a stump is perfect (nothing left to learn) or no stump
    beats chance. Default decision threshold is half the alpha sum.
    """
    labels = np.asarray(labels)
    weights = init_weights(labels)
    search = _StumpSearch(values, labels)
    stumps: list[Stump] = []
    alphas: list[float] = []
    for _ in range(rounds):
        stump, err = search.best(weights)
        if err >= 0.5:
            break
        v = values[stump.feature_index]
        pred = np.where(v < stump.threshold, stump.left, stump.right)
        alpha, weights = adaboost_round(weights, labels * pred, err)
        stumps.append(stump)
        alphas.append(alpha)
        if err <= 0.0:
            break
    if not stumps:
        raise TrainingError("no stump beat chance on round 1")
    return StrongClassifier(tuple(stumps), tuple(alphas), 0.5 * sum(alphas))


def adjust_threshold(sc: StrongClassifier, positive_scores: np.ndarray, d_min: float) -> float:
    """Largest theta keeping the passing fraction of positives >= d_min."""
    if len(positive_scores) == 0:
        raise TrainingError("need at least one positive score")
    k = math.ceil(d_min * len(positive_scores))
    k = min(max(k, 1), len(positive_scores))
    return float(np.sort(positive_scores)[::-1][k - 1])


# ------------------------------------------------------------ cascade assembly


def _round10(v: float) -> float:
    # the emitted model is defined at serialization precision
    return float(f"{v:.10g}")


def _stage_from(sc: StrongClassifier, features: list[HaarFeature], theta: float) -> Stage:
    trees = []
    for stump, alpha in zip(sc.stumps, sc.alphas):
        node = WeakNode(
            features[stump.feature_index],
            _round10(stump.threshold),
            Leaf(_round10(alpha * stump.left)),
            Leaf(_round10(alpha * stump.right)),
        )
        trees.append((node,))
    return Stage(tuple(trees), _round10(theta))


@dataclass(frozen=True)
class BuildResult:
    cascade: Cascade
    stage_fprs: tuple[float, ...]
    stage_tprs: tuple[float, ...]
    warning: str | None = None

    @property
    def projected_fpr(self) -> float:
        out = 1.0
        for f in self.stage_fprs:
            out *= f
        return out


def build_cascade(
    positives: list[Sample],
    negative_pool: list[Sample],
    targets: CascadeTargets,
    features: list[HaarFeature],
) -> BuildResult:
    """Attentional cascade: grow stages until the projected false-positive
    rate meets F_target, bootstrapping each stage's negatives from survivors
    of the cascade so far."""
    if not positives:
        raise TrainingError("need positives")
    if any(s.label != 1 for s in positives) or any(s.label != -1 for s in negative_pool):
        raise TrainingError("positives must be labeled +1 and negatives -1")
    window_w = positives[0].window.width
    window_h = positives[0].window.height

    pos_values = feature_values(features, positives)
    negatives = list(negative_pool)
    neg_values = feature_values(features, negatives)

    stages: list[Stage] = []
    stage_fprs: list[float] = []
    stage_tprs: list[float] = []
    warning = None

    while len(stages) < targets.max_stages:
        if len(negatives) < targets.min_negatives:
            warning = "negative pool exhausted before reaching the target rate"
            break
        values = np.concatenate([pos_values, neg_values], axis=1)
        labels = np.concatenate(
            [np.ones(len(positives), dtype=np.int64), -np.ones(len(negatives), dtype=np.int64)]
        )

        weights = init_weights(labels)
        search = _StumpSearch(values, labels)
        stumps: list[Stump] = []
        alphas: list[float] = []
        theta = 0.0
        fpr = 1.0
        while len(stumps) < targets.max_stumps_per_stage:
            stump, err = search.best(weights)
            if err >= 0.5:
                break
            v = values[stump.feature_index]
            pred = np.where(v < stump.threshold, stump.left, stump.right)
            alpha, weights = adaboost_round(weights, labels * pred, err)
            stumps.append(stump)
            alphas.append(alpha)
            sc = StrongClassifier(tuple(stumps), tuple(alphas), 0.0)
            pos_scores = sc.score_matrix(pos_values)
            # give every retained positive clearance over any re-summation
            theta = adjust_threshold(sc, pos_scores, targets.d_min) - _THETA_MARGIN
            neg_scores = sc.score_matrix(neg_values)
            fpr = float((neg_scores >= theta).mean())
            if fpr <= targets.f_max or err <= 0.0:
                break
        if not stumps:
            warning = "no stump beat chance; stopping early"
            break

        sc = StrongClassifier(tuple(stumps), tuple(alphas), theta)
        stage = _stage_from(sc, features, theta)
        stages.append(stage)
        # re-measure with the emitted stage (serialization-precision floats)
        emitted = StrongClassifier(
            tuple(
                Stump(s.feature_index, tree[0].threshold, s.left, s.right)
                for s, tree in zip(sc.stumps, stage.trees)
            ),
            tuple(abs(tree[0].left.value) for tree in stage.trees),
            stage.stage_threshold,
        )
        pos_pass = emitted.predict_matrix(pos_values)
        neg_pass = emitted.predict_matrix(neg_values)
        stage_tprs.append(float(pos_pass.mean()))
        stage_fprs.append(float(neg_pass.mean()) if len(negatives) else 0.0)

        keep = np.flatnonzero(neg_pass)
        negatives = [negatives[i] for i in keep]
        neg_values = neg_values[:, keep]

        projected = 1.0
        for f in stage_fprs:
            projected *= f
        if projected <= targets.F_target:
            break
    else:
        if stage_fprs:
            projected = 1.0
            for f in stage_fprs:
                projected *= f
            if projected > targets.F_target:
                warning = "stage limit reached before the target rate"

    if not stages:
        raise TrainingError("could not train a single stage")
    return BuildResult(
        Cascade(window_w, window_h, tuple(stages)),
        tuple(stage_fprs),
        tuple(stage_tprs),
        warning,
    )


# ------------------------------------------------------------- disk loading


def _as_gray(img) -> GrayImage:
    return img if isinstance(img, GrayImage) else to_grayscale(img)


def load_samples(
    pos_dir,
    neg_dir,
    window_w: int,
    window_h: int,
    *,
    crops_per_negative: int = 10,
    seed: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """Read positive and negative image directories.

    Positives must already be window-sized. Oversized negatives contribute
    crops_per_negative random window crops drawn with the fixed seed, so a
    rerun sees the same samples.
    """
    pos_dir = Path(pos_dir)
    neg_dir = Path(neg_dir)
    if not pos_dir.is_dir():
        raise TrainingError(f"positive sample directory {pos_dir} does not exist")
    if not neg_dir.is_dir():
        raise TrainingError(f"negative sample directory {neg_dir} does not exist")

    positives = []
    for p in sorted(pos_dir.iterdir()):
        if p.suffix.lower() not in (".pgm", ".ppm"):
            continue
        img = _as_gray(read_image(p))
        if img.width != window_w or img.height != window_h:
            raise TrainingError(f"{p.name}: positives must be {window_w}x{window_h}")
        positives.append(Sample(img, 1))

    rng = np.random.default_rng(seed)
    negatives = []
    for p in sorted(neg_dir.iterdir()):
        if p.suffix.lower() not in (".pgm", ".ppm"):
            continue
        img = _as_gray(read_image(p))
        if img.width == window_w and img.height == window_h:
            negatives.append(Sample(img, -1))
            continue
        if img.width < window_w or img.height < window_h:
            raise TrainingError(f"{p.name}: negative smaller than the window")
        for _ in range(crops_per_negative):
            x = int(rng.integers(0, img.width - window_w + 1))
            y = int(rng.integers(0, img.height - window_h + 1))
            negatives.append(Sample(crop(img, Rect(x, y, window_w, window_h)), -1))
    if not positives:
        raise TrainingError("no positive samples found")
    if not negatives:
        raise TrainingError("no negative samples found")
    return positives, negatives


def load_training_dirs(
    root,
    window_w: int,
    window_h: int,
    *,
    crops_per_negative: int = 10,
    seed: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """Read pos/ and neg/ image directories under one root."""
    root = Path(root)
    if not (root / "pos").is_dir() or not (root / "neg").is_dir():
        raise TrainingError(f"{root} must contain pos/ and neg/ directories")
    return load_samples(
        root / "pos",
        root / "neg",
        window_w,
        window_h,
        crops_per_negative=crops_per_negative,
        seed=seed,
    )
