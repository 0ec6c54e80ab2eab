"""Evaluation: region indices, confusion matrix, mask AP, depth and volume errors.

Predictions and ground truth are duck-typed: anything with ``class_id`` and
``mask`` (plus ``score`` for predictions and ``volume_ml`` where volumes are
compared) works, e.g. ``Detection`` and ``InstanceAnnotation``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FOOD_CLASSES

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
MATCH_IOU = 0.5


class MetricsError(ValueError):
    pass


def _stack(masks) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        return np.zeros((0, 0), dtype=bool)
    return np.stack([m.reshape(-1) for m in masks])


def intersections(a, b) -> np.ndarray:
    """``|A_i ∩ B_j|`` for all pairs, as an ``(m, n)`` integer matrix."""
    A, B = _stack(a), _stack(b)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]), dtype=np.int64)
    if A.shape[1] != B.shape[1]:
        raise MetricsError("segment sets live on different image grids")
    return A.astype(np.int64) @ B.T.astype(np.int64)


def mask_iou(a, b) -> np.ndarray:
    inter = intersections(a, b)
    area_a = _stack(a).sum(axis=1) if len(a) else np.zeros(0)
    area_b = _stack(b).sum(axis=1) if len(b) else np.zeros(0)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


# --------------------------------------------------------------------------- #
# region indices


def ni_directional(a, b, mode: str = "sum") -> float:
    """Overlap of each ``A_i`` with its best ``B_j``, normalized by ``|A_i|``.

    ``min`` takes the worst segment, ``sum`` pools over all segments. An
    empty ``A`` scores 0.
    """
    if mode not in ("min", "sum"):
        raise MetricsError(f"mode must be 'min' or 'sum', got {mode!r}")
    if len(a) == 0:
        return 0.0
    inter = intersections(a, b)
    best = inter.max(axis=1) if inter.shape[1] else np.zeros(inter.shape[0])
    area = _stack(a).sum(axis=1)
    if mode == "sum":
        return float(best.sum() / area.sum()) if area.sum() else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(area > 0, best / np.maximum(area, 1), 0.0)
    return float(ratio.min())


def f_combine(fwd: float, rev: float) -> float:
    """Harmonic mean of the two directions; 0 when both are 0."""
    s = fwd + rev
    return 0.0 if s == 0 else 2.0 * fwd * rev / s


def segmentation_scores(pred_masks, gt_masks) -> dict:
    """``f_min`` and ``f_sum`` of one image (fractions).

    ``T -> S`` normalizes by the predicted segments, ``S -> T`` by the
    ground-truth ones.
    """
    out = {}
    for mode in ("min", "sum"):
        t_to_s = ni_directional(pred_masks, gt_masks, mode)
        s_to_t = ni_directional(gt_masks, pred_masks, mode)
        out[f"f_{mode}"] = f_combine(t_to_s, s_to_t)
    return out


# --------------------------------------------------------------------------- #
# matching, confusion, volume


def match_to_gt(preds, gts, threshold: float = MATCH_IOU) -> list:
    """For each ground truth, the index of its maximal-IoU prediction (IoU >= threshold) or None.

    IoU ties go to the higher score, then the lower index.
    """
    if not gts:
        return []
    if not preds:
        return [None] * len(gts)
    iou = mask_iou([g.mask for g in gts], [p.mask for p in preds])
    scores = np.array([getattr(p, "score", 0.0) for p in preds])
    out = []
    for row in iou:
        order = np.lexsort((np.arange(len(preds)), -scores, -row))
        j = int(order[0])
        out.append(j if row[j] >= threshold else None)
    return out


@dataclass
class ConfusionMatrix:
    """Counts per (ground-truth class, predicted class); the last column counts missed items."""

    counts: np.ndarray
    class_names: tuple = tuple(c.name for c in FOOD_CLASSES)

    @property
    def percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist(),
                "percentages": self.percentages.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ConfusionMatrix":
        return cls(np.asarray(data["counts"], dtype=np.int64), tuple(data["class_names"]))


def confusion(pred_sets, gt_sets, num_classes: int = len(FOOD_CLASSES)) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    for preds, gts in zip(pred_sets, gt_sets):
        for g, j in zip(gts, match_to_gt(preds, gts)):
            counts[g.class_id, num_classes if j is None else preds[j].class_id] += 1
    names = tuple(c.name for c in FOOD_CLASSES) if num_classes == len(FOOD_CLASSES) else tuple(map(str, range(num_classes)))
    return ConfusionMatrix(counts, names)


def volume_errors(pred_sets, gt_sets) -> list:
    """Per-item absolute percentage errors; unmatched items score 100."""
    out = []
    for preds, gts in zip(pred_sets, gt_sets):
        for g, j in zip(gts, match_to_gt(preds, gts)):
            if j is None:
                out.append(100.0)
            else:
                out.append(abs(preds[j].volume_ml - g.volume_ml) / g.volume_ml * 100.0)
    return out


def volume_ape(pred_sets, gt_sets) -> float:
    errs = volume_errors(pred_sets, gt_sets)
    return float(np.mean(errs)) if errs else 0.0


# --------------------------------------------------------------------------- #
# average precision


def _interpolated_area(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(pred_sets, gt_sets, iou_threshold: float = 0.5, num_classes: int = len(FOOD_CLASSES),
                      per_class: bool = False):
    """Mask AP at one IoU threshold, averaged over classes that have ground truth.

    Per class, detections from all images are ranked by score (ties keep
    input order) and each takes the unmatched same-class ground truth of
    highest IoU at or above the threshold.
    """
    aps = {}
    ious = [mask_iou([p.mask for p in preds], [g.mask for g in gts]) if preds and gts else None
            for preds, gts in zip(pred_sets, gt_sets)]
    for c in range(num_classes):
        n_gt = sum(1 for gts in gt_sets for g in gts if g.class_id == c)
        if n_gt == 0:
            continue
        dets = [(p.score, img, i) for img, preds in enumerate(pred_sets) for i, p in enumerate(preds) if p.class_id == c]
        order = sorted(range(len(dets)), key=lambda k: -dets[k][0])
        used = [np.zeros(len(gts), dtype=bool) for gts in gt_sets]
        tp = np.zeros(len(dets))
        for rank, k in enumerate(order):
            _, img, i = dets[k]
            gts = gt_sets[img]
            if ious[img] is None:
                continue
            best, best_j = -1.0, None
            for j, g in enumerate(gts):
                if g.class_id != c or used[img][j]:
                    continue
                v = ious[img][i, j]
                if v >= iou_threshold and v > best:
                    best, best_j = v, j
            if best_j is not None:
                used[img][best_j] = True
                tp[rank] = 1.0
        aps[c] = _interpolated_area(tp, n_gt)
    mean = float(np.mean(list(aps.values()))) if aps else 0.0
    return (mean, aps) if per_class else mean


def mean_average_precision(pred_sets, gt_sets, num_classes: int = len(FOOD_CLASSES)) -> float:
    return float(np.mean([average_precision(pred_sets, gt_sets, t, num_classes) for t in IOU_THRESHOLDS]))


def pr_curve(pred_sets, gt_sets, class_id: int, iou_threshold: float = 0.5):
    """Raw (recall, precision) points of one class, for plotting."""
    dets = sorted(
        ((p.score, img, i) for img, preds in enumerate(pred_sets) for i, p in enumerate(preds) if p.class_id == class_id),
        key=lambda d: -d[0],
    )
    n_gt = sum(1 for gts in gt_sets for g in gts if g.class_id == class_id)
    used = [np.zeros(len(g), dtype=bool) for g in gt_sets]
    tp = []
    for _, img, i in dets:
        gts = gt_sets[img]
        cand = [j for j, g in enumerate(gts) if g.class_id == class_id and not used[img][j]]
        hit = None
        if cand:
            iou = mask_iou([pred_sets[img][i].mask], [gts[j].mask for j in cand])[0]
            k = int(np.argmax(iou))
            if iou[k] >= iou_threshold:
                hit = cand[k]
        if hit is not None:
            used[img][hit] = True
        tp.append(1.0 if hit is not None else 0.0)
    ctp = np.cumsum(tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.arange(1, len(tp) + 1) if tp else np.zeros(0)
    return recall, precision


# --------------------------------------------------------------------------- #
# depth


def depth_mad_ard(pred, gt, plate_mask) -> tuple:
    """MAD (mm) and ARD (%) over plate pixels; ``pred``/``gt`` are depth arrays or ``DepthMap`` in meters."""
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    m = np.asarray(plate_mask, dtype=bool)
    if p.shape != g.shape or m.shape != g.shape:
        raise MetricsError(f"shape mismatch: pred {p.shape}, gt {g.shape}, plate {m.shape}")
    if not m.any():
        raise MetricsError("plate mask is empty")
    if np.any(g[m] <= 0):
        raise MetricsError("ground-truth depth must be positive on the plate")
    diff = np.abs(p[m] - g[m])
    return float(diff.mean() * 1000.0), float((diff / g[m]).mean() * 100.0)


# --------------------------------------------------------------------------- #
# report


@dataclass
class MetricsReport:
    f_sum: float
    f_min: float
    ap50: float
    ap75: float
    map: float
    confusion: ConfusionMatrix
    mad_mm: float
    ard_percent: float
    volume_ape_percent: float
    mean_inference_seconds: float = 0.0
    n_images: int = 0
    regime: str = "full"
    per_class_ap50: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.to_dict()
        d["per_class_ap50"] = {FOOD_CLASSES[int(k)].name: v for k, v in self.per_class_ap50.items()}
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        names = [c.name for c in FOOD_CLASSES]
        d["confusion"] = ConfusionMatrix.from_dict(d["confusion"])
        d["per_class_ap50"] = {names.index(k): v for k, v in d.get("per_class_ap50", {}).items()}
        return cls(**d)


def evaluate(outputs, samples, regime: str = "full") -> MetricsReport:
    """Score network outputs against their samples.

    Segmentation and depth scores are computed per image and averaged over
    images; AP, confusion and volume error pool all items.
    """
    if not samples:
        raise MetricsError("nothing to evaluate")
    if len(outputs) != len(samples):
        raise MetricsError(f"{len(outputs)} outputs for {len(samples)} samples")
    pred_sets = [o.detections for o in outputs]
    gt_sets = [s.instances for s in samples]
    seg = [segmentation_scores([p.mask for p in ps], [g.mask for g in gs]) for ps, gs in zip(pred_sets, gt_sets)]
    depth = [depth_mad_ard(o.depth_predictions[-1], s.depth_gt, s.plate_mask) for o, s in zip(outputs, samples)]
    ap50, per_class = average_precision(pred_sets, gt_sets, 0.5, per_class=True)
    return MetricsReport(
        f_sum=100.0 * float(np.mean([s["f_sum"] for s in seg])),
        f_min=100.0 * float(np.mean([s["f_min"] for s in seg])),
        ap50=100.0 * ap50,
        ap75=100.0 * average_precision(pred_sets, gt_sets, 0.75),
        map=100.0 * mean_average_precision(pred_sets, gt_sets),
        confusion=confusion(pred_sets, gt_sets),
        mad_mm=float(np.mean([d[0] for d in depth])),
        ard_percent=float(np.mean([d[1] for d in depth])),
        volume_ape_percent=volume_ape(pred_sets, gt_sets),
        mean_inference_seconds=float(np.mean([o.inference_seconds for o in outputs])),
        n_images=len(samples),
        regime=regime,
        per_class_ap50={int(k): 100.0 * v for k, v in per_class.items()},
    )
