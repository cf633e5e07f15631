import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentinel.haar import eval_window
from sentinel.cascade_xml import parse_cascade, serialize_cascade
from sentinel.imaging import GrayImage, Rect, integral, window_stddev, write_image
from sentinel.haar import eval_feature
from sentinel.training import (
    BuildResult,
    CascadeTargets,
    Sample,
    Stump,
    StrongClassifier,
    TrainingError,
    adaboost_round,
    adjust_threshold,
    best_stump,
    build_cascade,
    feature_values,
    gen_features,
    init_weights,
    load_training_dirs,
    train_strong,
)


def gray(arr) -> GrayImage:
    return GrayImage(np.asarray(arr, dtype=np.uint8))


def noise_window(rng, w=24, h=24, lo=0, hi=256) -> GrayImage:
    return gray(rng.integers(lo, hi, size=(h, w)))


def split_window(rng, bright_top: bool, w=24, h=24) -> GrayImage:
    top = rng.integers(170, 231, size=(h // 2, w))
    bot = rng.integers(30, 91, size=(h // 2, w))
    stack = (top, bot) if bright_top else (bot, top)
    return gray(np.vstack(stack))


# ------------------------------------------------------------- gen_features


class TestGenFeatures:
    def test_four_by_four_full_grid_count(self):
        # counted by hand per kind: 40 + 40 + 20 + 20 + 16
        assert len(gen_features(4, 4, 1)) == 136

    def test_six_by_six_stride_two_count(self):
        # by hand: 12 + 12 + 6 + 6 + 4
        assert len(gen_features(6, 6, 2)) == 40

    def test_count_matches_position_formula(self):
        for W, H, s in [(8, 8, 1), (8, 6, 2), (12, 12, 3), (5, 7, 1)]:
            want = 0
            for dx, dy in [(1, 2), (2, 1), (1, 3), (3, 1), (2, 2)]:
                w = dx * s
                while w <= W:
                    h = dy * s
                    while h <= H:
                        want += ((W - w) // s + 1) * ((H - h) // s + 1)
                        h += dy * s
                    w += dx * s
            assert len(gen_features(W, H, s)) == want

    def test_degenerate_window_yields_nothing(self):
        assert gen_features(1, 1, 1) == []

    def test_bad_stride_rejected(self):
        with pytest.raises(ValueError):
            gen_features(8, 8, 0)

    def test_rects_fit_and_first_rect_encloses(self):
        for f in gen_features(6, 6, 1):
            assert f.fits(6, 6)
            outer, w0 = f.rects[0]
            assert w0 == -1.0
            for r, _ in f.rects[1:]:
                assert r.x >= outer.x and r.y >= outer.y
                assert r.x + r.w <= outer.x + outer.w
                assert r.y + r.h <= outer.y + outer.h

    def test_zero_response_on_constant_window(self):
        feats = gen_features(8, 8, 1)
        samples = [Sample(gray(np.full((8, 8), 57)), 1)]
        vals = feature_values(feats, samples)
        assert np.all(vals == 0.0)

    def test_all_five_kinds_present(self):
        feats = gen_features(6, 6, 1)
        three_rect = [f for f in feats if len(f.rects) == 3]
        two_rect = [f for f in feats if len(f.rects) == 2]
        assert three_rect and two_rect
        # checker positives sit on a diagonal
        for f in three_rect:
            a, b = f.rects[1][0], f.rects[2][0]
            assert b.x > a.x and b.y > a.y


# ----------------------------------------------------------- feature values


class TestFeatureValues:
    def test_matches_scalar_evaluation_bit_for_bit(self):
        rng = np.random.default_rng(11)
        feats = gen_features(8, 8, 1)
        samples = [Sample(noise_window(rng, 8, 8), 1) for _ in range(12)]
        vals = feature_values(feats, samples)
        nr = Rect(1, 1, 6, 6)
        for si, s in enumerate(samples):
            ii, sq = integral(s.window)
            sigma = window_stddev(ii, sq, nr)
            if sigma < 1e-6:
                sigma = 1.0
            for fi, f in enumerate(feats):
                want = eval_feature(f, ii, (0, 0), 1.0, float(nr.area), sigma)
                assert vals[fi, si] == want

    def test_mixed_window_sizes_rejected(self):
        rng = np.random.default_rng(1)
        samples = [Sample(noise_window(rng, 8, 8), 1), Sample(noise_window(rng, 6, 6), 1)]
        with pytest.raises(TrainingError):
            feature_values(gen_features(8, 8, 2), samples)


# ------------------------------------------------------------- weight setup


class TestInitWeights:
    def test_half_mass_per_class(self):
        labels = np.array([1, 1, 1, -1, -1])
        w = init_weights(labels)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert w[labels == 1].sum() == pytest.approx(0.5, abs=1e-12)
        assert np.allclose(w[:3], 1 / 6) and np.allclose(w[3:], 1 / 4)

    def test_single_class_rejected(self):
        with pytest.raises(TrainingError):
            init_weights(np.array([1, 1, 1]))


# --------------------------------------------------------------- best stump


def stump_oracle(values, labels, weights):
    """Every cut of every feature, both polarities, by brute force."""
    best = None
    for fi in range(values.shape[0]):
        v = values[fi]
        sv = np.sort(v)
        cands = [sv[0] - 1.0, sv[-1] + 1.0]
        for a, b in zip(sv[:-1], sv[1:]):
            if b - a > 1e-9 * max(abs(a), abs(b), 1e-30):
                cands.append((a + b) / 2.0)
        for thr in cands:
            for left in (1, -1):
                pred = np.where(v < thr, left, -left)
                err = float(weights[pred != labels].sum())
                key = (err, fi, thr, 0 if left == 1 else 1)
                if best is None or key < best[0]:
                    best = (key, Stump(fi, float(thr), left, -left))
    return best[1], best[0][0]


class TestBestStump:
    def test_matches_exhaustive_oracle(self):
        # dyadic values and weights keep both error sums exact, so the
        # comparison includes exact tie-breaking
        rng = np.random.default_rng(5)
        for _ in range(150):
            n = int(rng.integers(3, 13))
            f = int(rng.integers(1, 9))
            values = rng.integers(-16, 17, size=(f, n)) / 8.0
            labels = rng.choice([-1, 1], size=n)
            if len(set(labels.tolist())) < 2:
                labels[0] = -labels[0]
            # dyadic weights keep both error sums exact, ties included
            weights = rng.integers(1, 17, size=n) / 64.0
            got_stump, got_err = best_stump(values, labels, weights)
            want_stump, want_err = stump_oracle(values, labels, weights)
            assert got_err == pytest.approx(want_err, abs=1e-12)
            assert got_stump.feature_index == want_stump.feature_index
            assert got_stump.threshold == pytest.approx(want_stump.threshold, abs=1e-12)
            assert (got_stump.left, got_stump.right) == (want_stump.left, want_stump.right)

    def test_separable_feature_reaches_zero_error(self):
        values = np.array([[1.0, 2.0, 3.0, 10.0, 11.0, 12.0]])
        labels = np.array([1, 1, 1, -1, -1, -1])
        stump, err = best_stump(values, labels, np.full(6, 1 / 6))
        assert err == 0.0
        assert stump.left == 1 and stump.right == -1
        assert 3.0 < stump.threshold < 10.0

    def test_uniform_labels_need_one_constant_side(self):
        values = np.array([[1.0, 2.0, 3.0]])
        labels = np.array([1, 1, 1])
        stump, err = best_stump(values, labels, np.full(3, 1 / 3))
        assert err == 0.0
        # everything must land on the +1 side
        pred = np.where(values[0] < stump.threshold, stump.left, stump.right)
        assert np.all(pred == 1)

    def test_tie_prefers_lowest_feature_index(self):
        values = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        labels = np.array([1, -1])
        stump, err = best_stump(values, labels, np.array([0.5, 0.5]))
        assert err == 0.0
        assert stump.feature_index == 0


# ----------------------------------------------------------------- boosting


class TestAdaboostRound:
    def test_alpha_closed_form(self):
        w = np.full(10, 0.1)
        agree = np.ones(10)
        alpha, _ = adaboost_round(w, agree, 0.1)
        assert alpha == pytest.approx(0.5 * math.log(9.0), abs=1e-12)

    def test_chance_error_gives_zero_alpha(self):
        w = np.full(4, 0.25)
        alpha, w2 = adaboost_round(w, np.array([1, 1, -1, -1]), 0.5)
        assert alpha == 0.0
        assert np.allclose(w2, w, atol=1e-15)

    def test_worse_than_chance_rejected(self):
        with pytest.raises(TrainingError):
            adaboost_round(np.full(4, 0.25), np.ones(4), 0.6)

    def test_zero_error_clamped_to_finite_alpha(self):
        alpha, _ = adaboost_round(np.full(4, 0.25), np.ones(4), 0.0)
        assert alpha == pytest.approx(0.5 * math.log((1 - 1e-10) / 1e-10), rel=1e-9)

    def test_update_rebalances_to_half_error(self):
        # after the multiplicative update the round's stump sits at exactly
        # chance weight, the fixed point of the scheme
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(4, 40))
            raw = rng.random(n) + 0.01
            w = raw / raw.sum()
            agree = rng.choice([-1.0, 1.0], size=n)
            err = float(w[agree < 0].sum())
            if not 0.0 < err < 0.5:
                continue
            _, w2 = adaboost_round(w, agree, err)
            assert float(w2[agree < 0].sum()) == pytest.approx(0.5, abs=1e-9)

    @given(
        st.lists(st.floats(0.01, 10.0), min_size=2, max_size=40),
        st.integers(0, 2**32 - 1),
        st.floats(1e-6, 0.5),
    )
    @settings(max_examples=80, deadline=None)
    def test_weights_stay_normalized(self, raw, seed, eps):
        w = np.array(raw)
        w /= w.sum()
        agree = np.where(np.random.default_rng(seed).random(len(raw)) < 0.5, -1.0, 1.0)
        _, w2 = adaboost_round(w, agree, eps)
        assert abs(float(w2.sum()) - 1.0) <= 1e-9
        assert np.all(w2 > 0)


class TestTrainStrong:
    def test_separable_set_reaches_perfect_accuracy(self):
        rng = np.random.default_rng(17)
        samples = [Sample(split_window(rng, True), 1) for _ in range(40)]
        samples += [Sample(split_window(rng, False), -1) for _ in range(40)]
        labels = np.array([s.label for s in samples])
        feats = gen_features(24, 24, 8)
        values = feature_values(feats, samples)
        sc = train_strong(values, labels, 10)
        assert len(sc.stumps) <= 10
        pred = np.where(sc.score_matrix(values) >= sc.theta, 1, -1)
        assert np.all(pred == labels)
        assert sc.theta == pytest.approx(0.5 * sum(sc.alphas), abs=1e-12)
        assert all(a >= 0 for a in sc.alphas)

    def test_training_error_within_product_bound(self):
        rng = np.random.default_rng(23)
        # overlapping classes so several rounds run with nonzero errors
        samples = []
        for _ in range(60):
            w = split_window(rng, True).pixels.copy()
            w[:4] = rng.integers(0, 256, size=(4, 24))
            samples.append(Sample(gray(w), 1))
        for _ in range(60):
            samples.append(Sample(noise_window(rng), -1))
        labels = np.array([s.label for s in samples])
        feats = gen_features(24, 24, 6)
        values = feature_values(feats, samples)
        sc = train_strong(values, labels, 8)

        # recompute each round's weighted error independently
        weights = init_weights(labels)
        bound = 1.0
        for stump, alpha in zip(sc.stumps, sc.alphas):
            v = values[stump.feature_index]
            pred = np.where(v < stump.threshold, stump.left, stump.right)
            eps = float(weights[pred != labels].sum())
            bound *= 2.0 * math.sqrt(max(eps, 1e-10) * (1 - eps))
            _, weights = adaboost_round(weights, labels * pred, eps)
            assert abs(float(weights.sum()) - 1.0) <= 1e-9
        # default theta is the midpoint rule, the setting the bound speaks to
        miss = np.mean(np.where(sc.score_matrix(values) >= sc.theta, 1, -1) != labels)
        assert miss <= bound + 1e-12

    def test_hopeless_data_raises(self):
        values = np.array([[1.0, 1.0, 1.0, 1.0]])
        labels = np.array([1, -1, 1, -1])
        with pytest.raises(TrainingError):
            train_strong(values, labels, 5)


# --------------------------------------------------------- threshold setting


class TestAdjustThreshold:
    def theta_oracle(self, scores, d_min):
        best = None
        for t in scores:
            if float(np.mean(scores >= t)) >= d_min and (best is None or t > best):
                best = float(t)
        return best

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(9)
        sc = StrongClassifier((Stump(0, 0.0, 1, -1),), (1.0,), 0.0)
        for _ in range(100):
            scores = rng.integers(-20, 21, size=int(rng.integers(1, 30))) / 4.0
            d = float(rng.choice([0.5, 0.8, 0.9, 0.95, 0.99, 1.0]))
            got = adjust_threshold(sc, scores, d)
            assert got == self.theta_oracle(scores, d)

    def test_monotone_in_retention(self):
        rng = np.random.default_rng(29)
        sc = StrongClassifier((Stump(0, 0.0, 1, -1),), (1.0,), 0.0)
        for _ in range(30):
            scores = rng.random(25) * 10
            grid = [0.5, 0.7, 0.9, 0.95, 0.99, 1.0]
            thetas = [adjust_threshold(sc, scores, d) for d in grid]
            # a laxer retention target never lowers the cut
            for lax, strict in zip(thetas[:-1], thetas[1:]):
                assert lax >= strict

    def test_full_retention_uses_lowest_score(self):
        sc = StrongClassifier((Stump(0, 0.0, 1, -1),), (1.0,), 0.0)
        scores = np.array([3.0, -1.5, 2.0])
        assert adjust_threshold(sc, scores, 1.0) == -1.5

    def test_empty_scores_rejected(self):
        sc = StrongClassifier((Stump(0, 0.0, 1, -1),), (1.0,), 0.0)
        with pytest.raises(TrainingError):
            adjust_threshold(sc, np.array([]), 0.9)


# ------------------------------------------------------------ cascade build


def tiny_training_set(rng, n_pos=30, n_neg=200):
    pos = [Sample(split_window(rng, True), 1) for _ in range(n_pos)]
    neg = [Sample(noise_window(rng), -1) for _ in range(n_neg)]
    return pos, neg


def cascade_verdicts(cascade, samples):
    out = []
    for s in samples:
        ii, sq = integral(s.window)
        out.append(eval_window(cascade, ii, sq, (0, 0)))
    return out


class TestBuildCascade:
    def test_meets_rate_targets_on_training_data(self):
        rng = np.random.default_rng(41)
        pos, neg = tiny_training_set(rng)
        targets = CascadeTargets(d_min=0.95, f_max=0.6, F_target=0.3, max_stages=5, min_negatives=5)
        res = build_cascade(pos, neg, targets, gen_features(24, 24, 6))
        assert res.warning is None
        assert 1 <= len(res.cascade.stages) <= 5
        assert res.projected_fpr <= 0.3
        for tpr in res.stage_tprs:
            assert tpr >= 0.95
        got = cascade_verdicts(res.cascade, pos)
        assert sum(got) / len(got) >= 0.95

    def test_serialized_form_reproduces_decisions(self):
        rng = np.random.default_rng(43)
        pos, neg = tiny_training_set(rng)
        targets = CascadeTargets(d_min=0.95, f_max=0.6, F_target=0.3, max_stages=4, min_negatives=5)
        res = build_cascade(pos, neg, targets, gen_features(24, 24, 6))
        reloaded = parse_cascade(serialize_cascade(res.cascade))
        assert cascade_verdicts(reloaded, pos) == cascade_verdicts(res.cascade, pos)
        assert cascade_verdicts(reloaded, neg) == cascade_verdicts(res.cascade, neg)

    def test_emitted_floats_are_serialization_fixed_points(self):
        rng = np.random.default_rng(47)
        pos, neg = tiny_training_set(rng, 20, 80)
        targets = CascadeTargets(d_min=0.9, f_max=0.6, F_target=0.3, max_stages=3, min_negatives=5)
        res = build_cascade(pos, neg, targets, gen_features(24, 24, 8))
        for stage in res.cascade.stages:
            assert float(f"{stage.stage_threshold:.10g}") == stage.stage_threshold
            for tree in stage.trees:
                node = tree[0]
                assert float(f"{node.threshold:.10g}") == node.threshold
                assert float(f"{node.left.value:.10g}") == node.left.value
                assert float(f"{node.right.value:.10g}") == node.right.value

    def test_small_survivor_pool_sets_warning(self):
        rng = np.random.default_rng(53)
        pos = [Sample(split_window(rng, True), 1) for _ in range(25)]
        # forty easy rejects plus twenty near-duplicates of the positives
        # that survive stage one, leaving too few to keep training
        neg = [Sample(noise_window(rng), -1) for _ in range(40)]
        for i in range(20):
            base = pos[i % len(pos)].window.pixels.astype(np.int64)
            wob = np.clip(base + rng.integers(-6, 7, size=base.shape), 0, 255)
            neg.append(Sample(gray(wob), -1))
        targets = CascadeTargets(
            d_min=0.95, f_max=0.7, F_target=0.001, max_stages=6, min_negatives=30
        )
        res = build_cascade(pos, neg, targets, gen_features(24, 24, 8))
        assert res.warning is not None
        assert len(res.cascade.stages) >= 1
        assert res.projected_fpr > 0.001

    def test_label_and_emptiness_validation(self):
        rng = np.random.default_rng(59)
        pos, neg = tiny_training_set(rng, 4, 4)
        feats = gen_features(24, 24, 8)
        with pytest.raises(TrainingError):
            build_cascade([], neg, CascadeTargets(), feats)
        with pytest.raises(TrainingError):
            build_cascade(pos, [Sample(neg[0].window, 1)], CascadeTargets(), feats)

    def test_bad_targets_rejected(self):
        for kwargs in [
            {"d_min": 0.0},
            {"d_min": 1.5},
            {"f_max": 1.0},
            {"F_target": 0.0},
            {"max_stages": 0},
            {"min_negatives": 0},
        ]:
            with pytest.raises(ValueError):
                CascadeTargets(**kwargs)


# ------------------------------------------------------------- disk loading


class TestLoadTrainingDirs:
    def make_tree(self, root, rng):
        (root / "pos").mkdir(parents=True)
        (root / "neg").mkdir()
        for i in range(3):
            write_image(noise_window(rng, 8, 8), root / "pos" / f"p{i}.pgm")
        write_image(noise_window(rng, 8, 8), root / "neg" / "small.pgm")
        write_image(noise_window(rng, 40, 30), root / "neg" / "big.pgm")

    def test_loads_and_crops(self, tmp_path):
        self.make_tree(tmp_path, np.random.default_rng(61))
        pos, neg = load_training_dirs(tmp_path, 8, 8, crops_per_negative=5, seed=3)
        assert len(pos) == 3 and all(s.label == 1 for s in pos)
        # one window-sized negative plus five crops from the big one
        assert len(neg) == 6 and all(s.label == -1 for s in neg)
        for s in pos + neg:
            assert s.window.width == 8 and s.window.height == 8

    def test_crops_are_reproducible(self, tmp_path):
        self.make_tree(tmp_path, np.random.default_rng(67))
        a = load_training_dirs(tmp_path, 8, 8, crops_per_negative=5, seed=9)
        b = load_training_dirs(tmp_path, 8, 8, crops_per_negative=5, seed=9)
        for sa, sb in zip(a[1], b[1]):
            assert np.array_equal(sa.window.pixels, sb.window.pixels)

    def test_wrong_sized_positive_rejected(self, tmp_path):
        rng = np.random.default_rng(71)
        (tmp_path / "pos").mkdir()
        (tmp_path / "neg").mkdir()
        write_image(noise_window(rng, 9, 8), tmp_path / "pos" / "bad.pgm")
        write_image(noise_window(rng, 8, 8), tmp_path / "neg" / "n.pgm")
        with pytest.raises(TrainingError):
            load_training_dirs(tmp_path, 8, 8)

    def test_missing_layout_rejected(self, tmp_path):
        with pytest.raises(TrainingError):
            load_training_dirs(tmp_path, 8, 8)
