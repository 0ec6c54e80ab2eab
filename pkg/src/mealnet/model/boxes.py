"""Box utilities: IoU, delta coding, deterministic NMS."""
from __future__ import annotations

import math

import numpy as np
import torch
from torchvision.ops import nms as _nms_kernel

BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_DELTA_CLAMP = math.log(1000.0 / 16)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, ``(N, 4) x (M, 4) -> (N, M)``; boxes are ``(x0, y0, x1, y1)``."""
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode(reference: torch.Tensor, target: torch.Tensor, weights=BOX_CODER_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1
    )


def decode(reference: torch.Tensor, deltas: torch.Tensor, weights=BOX_CODER_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_DELTA_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_DELTA_CLAMP)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = torch.exp(dw) * rw
    h = torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, size: float) -> torch.Tensor:
    return boxes.clamp(min=0.0, max=float(size))


def order_by_score(scores: torch.Tensor) -> torch.Tensor:
    """Descending score order; equal scores keep ascending index order."""
    return torch.sort(scores, descending=True, stable=True).indices


def nms(boxes: torch.Tensor, scores: torch.Tensor, threshold: float, limit: int | None = None) -> torch.Tensor:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order. A box is suppressed when
    its IoU with an already kept box is strictly greater than ``threshold``,
    so ``threshold >= 1`` suppresses nothing. Equal scores rank by index.
    """
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = order_by_score(scores)
    if threshold >= 1.0:
        return order if limit is None else order[:limit]
    # strictly decreasing surrogate scores pin the kernel to our tie-break
    rank = torch.arange(order.numel(), 0, -1, dtype=torch.float32)
    keep = order[_nms_kernel(boxes.detach()[order].float(), rank, threshold)]
    return keep if limit is None else keep[:limit]


def nms_reference(boxes: torch.Tensor, scores: torch.Tensor, threshold: float, limit: int | None = None) -> torch.Tensor:
    """Pure-numpy greedy NMS with the same contract as ``nms``.

    Returns kept indices in descending score order. A box is suppressed when
    its IoU with an already kept box is strictly greater than ``threshold``,
    so ``threshold >= 1`` suppresses nothing.
    """
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = order_by_score(scores)
    if threshold >= 1.0:
        return order if limit is None else order[:limit]
    b = boxes.detach()[order].double().numpy()
    area = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    n = len(order)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if limit is not None and len(keep) >= limit:
            break
        rest = b[i + 1:]
        w = np.clip(np.minimum(b[i, 2], rest[:, 2]) - np.maximum(b[i, 0], rest[:, 0]), 0, None)
        h = np.clip(np.minimum(b[i, 3], rest[:, 3]) - np.maximum(b[i, 1], rest[:, 1]), 0, None)
        inter = w * h
        union = area[i] + area[i + 1:] - inter
        iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
        suppressed[i + 1:] |= iou > threshold
    return order[torch.as_tensor(keep, dtype=torch.long)]


def batched_nms(boxes, scores, labels, threshold, limit=None):
    """Per-label NMS; merged result sorted by score."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    offset = labels.to(boxes.dtype)[:, None] * (boxes.max() + 1.0)
    keep = nms(boxes + offset, scores, threshold)
    return keep if limit is None else keep[:limit]
