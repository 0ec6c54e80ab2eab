"""Anchors and target assignment for the proposal and RoI stages."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .boxes import box_iou, encode
from .roi import roi_resize_map


def make_anchors(sizes, scales, ratios, strides, image_size) -> torch.Tensor:
    """All anchors as pixel boxes, ordered level, row, column, then shape.

    The order matches the flattened RPN head outputs.
    """
    out = []
    for size, stride in zip(sizes, strides):
        shapes = []
        for s in scales:
            for r in ratios:  # r = height / width
                w = size * s / r**0.5
                h = size * s * r**0.5
                shapes.append((-w / 2, -h / 2, w / 2, h / 2))
        shapes = torch.tensor(shapes, dtype=torch.float32)
        n = image_size // stride
        c = (torch.arange(n, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(c, c, indexing="ij")
        centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        out.append((centers + shapes[None]).reshape(-1, 4))
    return torch.cat(out)


@dataclass
class RoiTargets:
    """Per-RoI assignment. ``labels`` is 0 for negatives, the food class + 1 for positives."""

    matched: torch.Tensor  # index of the best-IoU ground-truth box (-1 if there is none)
    max_iou: torch.Tensor
    positive: torch.Tensor
    labels: torch.Tensor


def assign_targets(rois: torch.Tensor, gt_boxes: torch.Tensor, gt_classes: torch.Tensor,
                   threshold: float = 0.7) -> RoiTargets:
    """Match each RoI to its maximal-IoU ground truth; positive iff IoU > threshold.

    Ties in IoU resolve to the lowest ground-truth index. ``gt_classes`` are
    food class ids (0-based); positive labels are shifted by one so that 0
    means background.
    """
    n = rois.shape[0]
    if gt_boxes.shape[0] == 0 or n == 0:
        z = torch.zeros(n, dtype=torch.long)
        return RoiTargets(z - 1, torch.zeros(n), torch.zeros(n, dtype=torch.bool), z)
    iou = box_iou(rois, gt_boxes)
    max_iou, matched = iou.max(dim=1)
    positive = max_iou > threshold
    labels = torch.where(positive, gt_classes[matched] + 1, torch.zeros_like(matched))
    return RoiTargets(matched, max_iou, positive, labels)


def sample_rois(targets: RoiTargets, batch: int, positive_fraction: float, generator: torch.Generator) -> torch.Tensor:
    """Indices of a fixed-size RoI minibatch with bounded positive share."""
    pos = targets.positive.nonzero().flatten()
    neg = (~targets.positive).nonzero().flatten()
    n_pos = min(int(batch * positive_fraction), pos.numel())
    n_neg = min(batch - n_pos, neg.numel())
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return torch.cat([pos, neg])


def label_anchors(anchors, gt_boxes, pos_iou, neg_iou, batch, generator):
    """RPN anchor labels (1/0/-1) and regression targets for one image."""
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    deltas = torch.zeros_like(anchors)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
    else:
        iou = box_iou(anchors, gt_boxes)
        max_iou, matched = iou.max(dim=1)
        labels[max_iou < neg_iou] = 0
        labels[max_iou >= pos_iou] = 1
        # every ground truth keeps its best anchors
        best = iou.max(dim=0).values
        for j in range(gt_boxes.shape[0]):
            if best[j] > 0:
                labels[(iou[:, j] == best[j])] = 1
                matched[(iou[:, j] == best[j])] = j
        deltas = encode(anchors, gt_boxes[matched])
    pos = (labels == 1).nonzero().flatten()
    neg = (labels == 0).nonzero().flatten()
    n_pos = min(batch // 2, pos.numel())
    n_neg = min(batch - n_pos, neg.numel())
    keep = torch.cat([
        pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]],
        neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]],
    ])
    sampled = torch.full_like(labels, -1)
    sampled[keep] = labels[keep]
    return sampled, deltas


def mask_targets(gt_masks: torch.Tensor, matched: torch.Tensor, rois: torch.Tensor,
                 image_size: int, size: int) -> torch.Tensor:
    """Crop each matched ground-truth mask to its RoI and resample to ``size``; binary output."""
    if rois.shape[0] == 0:
        return gt_masks.new_zeros((0, size, size))
    out = []
    norm = rois / float(image_size)
    for j in torch.unique(matched).tolist():
        sel = (matched == j).nonzero().flatten()
        patch = roi_resize_map(gt_masks[j][None, None].float(), norm[sel], size, sampling=1)
        out.append((sel, patch[:, 0]))
    result = gt_masks.new_zeros((rois.shape[0], size, size), dtype=torch.float32)
    for sel, patch in out:
        result[sel] = patch
    return (result >= 0.5).float()
