"""Bilinear RoI resizing over a feature pyramid.

Boxes are sampled with ``grid_sample`` so the patch is differentiable with
respect to both the feature map and the box coordinates.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

# boxes whose side is sqrt(area) ~ CANONICAL_SIZE pixels map to CANONICAL_LEVEL
CANONICAL_SIZE = 48.0
CANONICAL_LEVEL = 1  # index into (stride 4, 8, 16, 32)


def assign_levels(boxes: torch.Tensor, num_levels: int = 4) -> torch.Tensor:
    """FPN level rule ``floor(k0 + log2(sqrt(wh) / s0))`` on pixel boxes, clamped to the pyramid."""
    w = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
    h = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
    k = torch.floor(CANONICAL_LEVEL + torch.log2(torch.sqrt(w * h) / CANONICAL_SIZE) + 1e-6)
    return k.clamp(0, num_levels - 1).long()


def _grid(boxes_norm: torch.Tensor, out_size: int, sampling: int) -> torch.Tensor:
    """Sampling grid in ``grid_sample`` coordinates for normalized boxes, ``(K, n, n, 2)``."""
    n = out_size * sampling
    steps = (torch.arange(n, dtype=boxes_norm.dtype, device=boxes_norm.device) + 0.5) / n
    x0, y0, x1, y1 = boxes_norm.unbind(dim=1)
    xs = x0[:, None] + (x1 - x0)[:, None] * steps[None]
    ys = y0[:, None] + (y1 - y0)[:, None] * steps[None]
    gx = (2 * xs - 1)[:, None, :].expand(-1, n, -1)
    gy = (2 * ys - 1)[:, :, None].expand(-1, -1, n)
    return torch.stack([gx, gy], dim=-1)


def roi_resize_map(feature: torch.Tensor, boxes_norm: torch.Tensor, out_size: int, sampling: int = 2) -> torch.Tensor:
    """Resize boxes from one ``(1, C, H, W)`` map into ``(K, C, out, out)`` patches.

    Each output cell averages ``sampling**2`` bilinear samples taken at the
    centers of a regular sub-grid inside the cell.
    """
    k = boxes_norm.shape[0]
    if k == 0:
        return feature.new_zeros((0, feature.shape[1], out_size, out_size))
    grid = _grid(boxes_norm, out_size, sampling)
    n = out_size * sampling
    stacked = grid.reshape(1, k * n, n, 2)
    patch = F.grid_sample(feature, stacked, mode="bilinear", padding_mode="border", align_corners=False)
    patch = patch.reshape(feature.shape[1], k, n, n).transpose(0, 1)
    if sampling > 1:
        patch = F.avg_pool2d(patch, sampling)
    return patch


def roi_resize(levels: list, boxes: torch.Tensor, batch_index: torch.Tensor, image_size: int,
               out_size: int, sampling: int = 2) -> torch.Tensor:
    """Resize pixel-coordinate boxes from the level chosen by their area.

    ``levels`` are ``(B, C, H, W)`` maps at strides 4-32; ``batch_index``
    names the image of each box.
    """
    out = levels[0].new_zeros((boxes.shape[0], levels[0].shape[1], out_size, out_size))
    if boxes.shape[0] == 0:
        return out
    lvl = assign_levels(boxes, len(levels))
    norm = boxes / float(image_size)
    for b in torch.unique(batch_index).tolist():
        for li in torch.unique(lvl).tolist():
            sel = ((batch_index == b) & (lvl == li)).nonzero().flatten()
            if sel.numel():
                out = out.index_copy(0, sel, roi_resize_map(levels[li][b:b + 1], norm[sel], out_size, sampling))
    return out


def level_scale(size: float) -> int:
    """Pyramid level index for a square box of side ``size`` pixels."""
    return int(min(3, max(0, math.floor(CANONICAL_LEVEL + math.log2(size / CANONICAL_SIZE) + 1e-6))))
