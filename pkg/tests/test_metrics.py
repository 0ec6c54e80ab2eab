from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mealnet.dataset import generate_scene
from mealnet.geometry import DepthMap
from mealnet.metrics import (
    IOU_THRESHOLDS,
    ConfusionMatrix,
    MetricsError,
    MetricsReport,
    average_precision,
    confusion,
    depth_mad_ard,
    evaluate,
    f_combine,
    mean_average_precision,
    ni_directional,
    segmentation_scores,
    volume_ape,
    volume_errors,
)
from mealnet.model.network import Detection, NetworkOutputs

N_CLASSES = 3
N_TRIALS = 120


@dataclass
class Item:
    class_id: int
    mask: np.ndarray
    score: float = 1.0
    volume_ml: float = 100.0


# --------------------------------------------------------------------------- #
# brute-force references: explicit per-pixel loops, written independently


def bf_count(a, b=None):
    h, w = a.shape
    n = 0
    for r in range(h):
        for c in range(w):
            if a[r, c] and (b is None or b[r, c]):
                n += 1
    return n


def bf_iou(a, b):
    inter = bf_count(a, b)
    union = bf_count(a) + bf_count(b) - inter
    return inter / union if union else 0.0


def bf_ni(A, B, mode):
    if not A:
        return 0.0
    best = [max([bf_count(a, b) for b in B], default=0) for a in A]
    areas = [bf_count(a) for a in A]
    if mode == "sum":
        return sum(best) / sum(areas)
    return min(x / y for x, y in zip(best, areas))


def bf_f(x, y):
    return 0.0 if x + y == 0 else 2 * x * y / (x + y)


def bf_match(preds, gts):
    out = []
    for g in gts:
        best, best_j = None, None
        for j, p in enumerate(preds):
            key = (bf_iou(g.mask, p.mask), p.score)
            if best is None or key > best:
                best, best_j = key, j
        out.append(best_j if best is not None and best[0] >= 0.5 else None)
    return out


def bf_confusion(pred_sets, gt_sets):
    counts = np.zeros((N_CLASSES, N_CLASSES + 1), dtype=int)
    for preds, gts in zip(pred_sets, gt_sets):
        for g, j in zip(gts, bf_match(preds, gts)):
            counts[g.class_id, N_CLASSES if j is None else preds[j].class_id] += 1
    return counts


def bf_ap(pred_sets, gt_sets, thr):
    aps = []
    for c in range(N_CLASSES):
        n_gt = sum(g.class_id == c for gts in gt_sets for g in gts)
        if n_gt == 0:
            continue
        dets = sorted(
            [(-p.score, img, i) for img, ps in enumerate(pred_sets) for i, p in enumerate(ps) if p.class_id == c]
        )
        taken = set()
        hits = []
        for _, img, i in dets:
            p = pred_sets[img][i]
            cands = [(bf_iou(p.mask, g.mask), -j) for j, g in enumerate(gt_sets[img])
                     if g.class_id == c and (img, j) not in taken]
            cands = [x for x in cands if x[0] >= thr]
            if cands:
                _, neg_j = max(cands)
                taken.add((img, -neg_j))
                hits.append(1)
            else:
                hits.append(0)
        recall = [sum(hits[:k + 1]) / n_gt for k in range(len(hits))]
        precision = [sum(hits[:k + 1]) / (k + 1) for k in range(len(hits))]
        area, prev = 0.0, 0.0
        for r in sorted(set(recall)):
            if r > prev:
                area += (r - prev) * max(p for rr, p in zip(recall, precision) if rr >= r)
                prev = r
        aps.append(area)
    return sum(aps) / len(aps) if aps else 0.0


# --------------------------------------------------------------------------- #
# random instances


def random_gt(rng, h, w, k):
    while True:
        labels = rng.integers(-1, k, size=(h, w))
        if all((labels == i).any() for i in range(k)):
            return [Item(int(rng.integers(N_CLASSES)), labels == i) for i in range(k)]


def random_preds(rng, gts, h, w, n):
    preds = []
    for _ in range(n):
        if gts and rng.random() < 0.6:
            m = gts[int(rng.integers(len(gts)))].mask.copy()
            flip = rng.random((h, w)) < 0.15
            m = m ^ flip
        else:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            m = np.zeros((h, w), bool)
            m[y0:y0 + rng.integers(1, h), x0:x0 + rng.integers(1, w)] = True
        if not m.any():
            m[0, 0] = True
        score = float(np.round(rng.random(), 1))  # coarse scores produce ties
        preds.append(Item(int(rng.integers(N_CLASSES)), m, score, float(rng.uniform(50, 150))))
    return preds


def random_instance(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 17, size=2)
    gts = random_gt(rng, h, w, int(rng.integers(1, 5)))
    preds = random_preds(rng, gts, h, w, int(rng.integers(0, 9)))
    return gts, preds


def random_batch(seed, n_images=3):
    pairs = [random_instance(seed * 10 + i) for i in range(n_images)]
    return [p for _, p in pairs], [g for g, _ in pairs]


# --------------------------------------------------------------------------- #


class TestRegionIndices:
    def test_identical(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert ni_directional([m], [m], "min") == 1.0 and ni_directional([m], [m], "sum") == 1.0

    def test_shifted_block(self):
        a = np.zeros((4, 4), bool)
        a[0:2, 0:2] = True
        b = np.roll(a, 1, axis=1)
        assert ni_directional([a], [b], "min") == 0.5 and ni_directional([a], [b], "sum") == 0.5

    def test_empty_a_scores_zero(self):
        assert ni_directional([], [np.ones((2, 2), bool)]) == 0.0

    def test_bad_mode(self):
        with pytest.raises(MetricsError):
            ni_directional([np.ones((2, 2), bool)], [], "max")

    def test_direction_normalization(self):
        # one big predicted segment covering two ground-truth segments
        gt = [np.zeros((2, 4), bool), np.zeros((2, 4), bool)]
        gt[0][:, :2] = True
        gt[1][:, 2:] = True
        pred = [np.ones((2, 4), bool)]
        s = segmentation_scores(pred, gt)
        # T -> S normalizes by the prediction (4/8); S -> T by the ground truth (1)
        assert s["f_sum"] == pytest.approx(bf_f(0.5, 1.0)) and s["f_min"] == pytest.approx(bf_f(0.5, 1.0))

    @pytest.mark.parametrize("seed", range(N_TRIALS))
    def test_matches_brute_force(self, seed):
        gts, preds = random_instance(seed)
        G, P = [g.mask for g in gts], [p.mask for p in preds]
        for mode in ("min", "sum"):
            assert abs(ni_directional(P, G, mode) - bf_ni(P, G, mode)) <= 1e-12
            assert abs(ni_directional(G, P, mode) - bf_ni(G, P, mode)) <= 1e-12
            want = bf_f(bf_ni(P, G, mode), bf_ni(G, P, mode))
            assert abs(segmentation_scores(P, G)[f"f_{mode}"] - want) <= 1e-12

    def test_permutation_and_translation_invariance(self):
        for seed in range(30):
            gts, preds = random_instance(seed)
            G, P = [g.mask for g in gts], [p.mask for p in preds]
            rng = np.random.default_rng(seed)

            def move(ms):
                out = []
                for m in ms:
                    big = np.zeros((m.shape[0] + 5, m.shape[1] + 3), bool)
                    big[5:, 3:] = m
                    out.append(big)
                return out

            Gp = move([G[i] for i in rng.permutation(len(G))])
            Pp = move([P[i] for i in rng.permutation(len(P))])
            assert segmentation_scores(P, G) == pytest.approx(segmentation_scores(Pp, Gp), abs=1e-12)


class TestCombine:
    def test_examples(self):
        assert f_combine(1, 1) == 1 and f_combine(0.5, 0.5) == 0.5 and f_combine(1, 0) == 0 and f_combine(0, 0) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_bounds(self, x, y):
        f = f_combine(x, y)
        assert f == pytest.approx(f_combine(y, x))
        assert 0 <= f <= min(2 * x, 2 * y) + 1e-12 and f <= (x + y) / 2 + 1e-12


class TestConfusion:
    @pytest.mark.parametrize("seed", range(N_TRIALS))
    def test_matches_brute_force(self, seed):
        pred_sets, gt_sets = random_batch(seed)
        got = confusion(pred_sets, gt_sets, N_CLASSES)
        assert np.array_equal(got.counts, bf_confusion(pred_sets, gt_sets))

    def test_all_correct_is_identity(self):
        gts = random_gt(np.random.default_rng(0), 8, 8, 4)
        for i, g in enumerate(gts):
            g.class_id = i % N_CLASSES
        cm = confusion([gts], [gts], N_CLASSES)
        pct = cm.percentages
        present = cm.counts.sum(1) > 0
        assert np.all(np.diag(pct)[present] == 100.0) and pct[:, -1].sum() == 0

    def test_rows_sum_to_100(self):
        pred_sets, gt_sets = random_batch(5)
        cm = confusion(pred_sets, gt_sets, N_CLASSES)
        rows = cm.percentages.sum(1)
        assert np.allclose(rows[cm.counts.sum(1) > 0], 100.0)

    def test_round_trip(self):
        cm = ConfusionMatrix(np.arange(42).reshape(6, 7))
        assert np.array_equal(ConfusionMatrix.from_dict(cm.to_dict()).counts, cm.counts)


class TestAP:
    @pytest.mark.parametrize("seed", range(N_TRIALS))
    def test_matches_brute_force(self, seed):
        pred_sets, gt_sets = random_batch(seed)
        for thr in (0.5, 0.75, 0.9):
            got = average_precision(pred_sets, gt_sets, thr, N_CLASSES)
            assert abs(got - bf_ap(pred_sets, gt_sets, thr)) <= 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_map_matches_brute_force(self, seed):
        pred_sets, gt_sets = random_batch(1000 + seed)
        want = np.mean([bf_ap(pred_sets, gt_sets, t) for t in IOU_THRESHOLDS])
        got = mean_average_precision(pred_sets, gt_sets, N_CLASSES)
        assert abs(got - want) <= 1e-9
        assert got <= average_precision(pred_sets, gt_sets, 0.5, N_CLASSES) + 1e-12

    def test_perfect(self):
        gts = random_gt(np.random.default_rng(1), 10, 10, 4)
        assert mean_average_precision([gts], [gts], N_CLASSES) == 1.0

    def test_wrong_class(self):
        gts = random_gt(np.random.default_rng(2), 10, 10, 3)
        for g in gts:
            g.class_id = 0
        preds = [Item(1, g.mask) for g in gts]
        assert average_precision([preds], [gts], 0.5, N_CLASSES) == 0.0

    def test_absent_classes_excluded(self):
        m = np.ones((2, 2), bool)
        assert average_precision([[Item(0, m)]], [[Item(0, m)]], 0.5, N_CLASSES) == 1.0

    def test_miss_ranked_first(self):
        # two ground truths, a miss ranked above one hit -> AP = 0.5 * 0.5
        a = np.zeros((2, 4), bool)
        a[:, :2] = True
        b = ~a
        miss = np.zeros((2, 4), bool)
        miss[0, 3] = True
        preds = [Item(0, miss, 0.9), Item(0, a, 0.8)]
        assert average_precision([preds], [[Item(0, a), Item(0, b)]], 0.5, N_CLASSES) == pytest.approx(0.25)


class TestDepth:
    def test_exact(self):
        g = np.full((4, 4), 0.4)
        assert depth_mad_ard(g, g, np.ones((4, 4), bool)) == (0.0, 0.0)

    def test_offset_example(self):
        g = np.full((4, 4), 0.4)
        mad, ard = depth_mad_ard(DepthMap(g + 0.005), DepthMap(g), np.ones((4, 4), bool))
        assert mad == pytest.approx(5.0, abs=1e-9) and ard == pytest.approx(1.25, abs=1e-9)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p, g = rng.uniform(0, 1, (6, 7)), rng.uniform(0.1, 1, (6, 7))
            m = rng.random((6, 7)) < 0.5
            m[0, 0] = True
            diffs = [(abs(p[r, c] - g[r, c]), g[r, c]) for r in range(6) for c in range(7) if m[r, c]]
            mad = sum(d for d, _ in diffs) / len(diffs) * 1000
            ard = sum(d / gg for d, gg in diffs) / len(diffs) * 100
            assert depth_mad_ard(p, g, m) == pytest.approx((mad, ard), abs=1e-9)

    def test_errors(self):
        with pytest.raises(MetricsError):
            depth_mad_ard(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
        with pytest.raises(MetricsError):
            depth_mad_ard(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2), bool))


class TestVolume:
    def test_single_item(self):
        m = np.ones((2, 2), bool)
        assert volume_ape([[Item(0, m, volume_ml=119.0)]], [[Item(0, m, volume_ml=100.0)]]) == pytest.approx(19.0)

    def test_three_items_by_hand(self):
        masks = [np.zeros((3, 3), bool) for _ in range(3)]
        for i, m in enumerate(masks):
            m[i] = True
        gts = [Item(0, masks[0], volume_ml=50.0), Item(1, masks[1], volume_ml=80.0), Item(2, masks[2], volume_ml=20.0)]
        preds = [Item(0, masks[0], volume_ml=60.0), Item(2, masks[1], volume_ml=80.0)]
        assert volume_errors([preds], [gts]) == pytest.approx([20.0, 0.0, 100.0])
        assert volume_ape([preds], [gts]) == pytest.approx(40.0)

    def test_all_exact(self):
        gts = random_gt(np.random.default_rng(4), 6, 6, 3)
        assert volume_ape([gts], [gts]) == 0.0


class TestReport:
    def _perfect(self, sample):
        dets = [Detection(i.class_id, 1.0, tuple(map(float, i.bbox)), i.mask, i.volume_ml) for i in sample.instances]
        return NetworkOutputs([sample.depth_gt] * 4, None, dets, inference_seconds=0.25)

    def test_perfect_predictions(self, tmp_path):
        samples = [generate_scene(1), generate_scene(1, capture=2)]
        report = evaluate([self._perfect(s) for s in samples], samples)
        assert (report.f_sum, report.f_min, report.ap50, report.map) == (100.0, 100.0, 100.0, 100.0)
        assert report.mad_mm == 0 and report.volume_ape_percent == 0 and report.mean_inference_seconds == 0.25
        pct = report.confusion.percentages
        rows = report.confusion.counts.sum(1) > 0
        assert np.all(np.diag(pct)[rows] == 100.0)
        back = MetricsReport.load(report.save(tmp_path / "r.json"))
        assert back.to_dict() == report.to_dict()

    def test_mismatched_lengths(self):
        s = generate_scene(1)
        with pytest.raises(MetricsError):
            evaluate([], [s])
        with pytest.raises(MetricsError):
            evaluate([self._perfect(s)] * 2, [s])
