"""Training objectives.

The per-image objective is the plain sum of the multi-scale depth terms and,
over the sampled RoIs, the recognition, box, mask and volume terms. Mask and
volume terms exist only for positive RoIs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .geometry import GeometryError

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "loss_depth",
    "loss_volume",
    "loss_cls",
    "loss_bbox",
    "loss_mask",
    "loss_total",
    "rpn_losses",
]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.01
    epsilon_vol: float = 1e-6  # liters
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.epsilon_vol > 0:
            raise ValueError(f"epsilon_vol must be > 0, got {self.epsilon_vol}")


@dataclass
class LossBreakdown:
    """Loss terms of one image (or the mean over a batch of images).

    ``total`` is the sum of the depth scales and the per-RoI terms.
    ``normalized`` replaces each RoI sum by a per-RoI average (classification
    and boxes over the sampled RoIs, mask and volume over the positives) so
    the step size does not grow with the RoI batch. ``objective``, the
    quantity that is optimized, is ``normalized`` plus the proposal-stage terms.
    """

    depth: list
    cls: torch.Tensor
    bbox: torch.Tensor
    mask: torch.Tensor
    vol: torch.Tensor
    total: torch.Tensor
    rpn_cls: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    rpn_bbox: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    normalized: torch.Tensor | None = None

    @property
    def objective(self) -> torch.Tensor:
        base = self.total if self.normalized is None else self.normalized
        return base + self.rpn_cls + self.rpn_bbox

    def as_dict(self) -> dict:
        out = {f"depth_{i}": float(d.detach()) for i, d in enumerate(self.depth)}
        for name in ("cls", "bbox", "mask", "vol", "total", "rpn_cls", "rpn_bbox"):
            out[name] = float(getattr(self, name).detach())
        out["objective"] = float(self.objective.detach())
        return out

    @staticmethod
    def mean(items: list) -> "LossBreakdown":
        n = len(items)

        def avg(name):
            return sum(getattr(b, name) for b in items) / n

        normalized = None
        if all(b.normalized is not None for b in items):
            normalized = avg("normalized")
        return LossBreakdown(
            depth=[sum(b.depth[i] for b in items) / n for i in range(len(items[0].depth))],
            cls=avg("cls"), bbox=avg("bbox"), mask=avg("mask"), vol=avg("vol"), total=avg("total"),
            rpn_cls=avg("rpn_cls"), rpn_bbox=avg("rpn_bbox"), normalized=normalized,
        )


def loss_depth(preds: list, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error (m) at every scale, ``gt`` area-downsampled to each.

    ``preds`` are ``(B, 1, s, s)`` maps; ``gt`` is ``(B, 1, S, S)`` at the
    largest scale. Returns a ``(len(preds),)`` tensor.
    """
    full = gt.shape[-1]
    out = []
    for p in preds:
        s = p.shape[-1]
        if full % s or p.shape[-2] * full != gt.shape[-2] * s:
            raise GeometryError(f"prediction scale {tuple(p.shape[-2:])} does not divide gt {tuple(gt.shape[-2:])}")
        target = gt if s == full else F.avg_pool2d(gt, full // s)
        out.append((p - target).abs().mean())
    return torch.stack(out)


def loss_volume(v_hat, v_star, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Absolute percentage error plus ``alpha`` times absolute error; both volumes in liters."""
    v_hat = torch.as_tensor(v_hat, dtype=torch.float64) if not torch.is_tensor(v_hat) else v_hat
    v_star = torch.as_tensor(v_star, dtype=v_hat.dtype) if not torch.is_tensor(v_star) else v_star
    diff = (v_hat - v_star).abs()
    return diff / v_star.clamp(min=config.epsilon_vol) + config.alpha * diff


def loss_cls(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-RoI softmax cross-entropy; label 0 is background."""
    return F.cross_entropy(logits, labels, reduction="none")


def loss_bbox(pred_deltas: torch.Tensor, target_deltas: torch.Tensor, positive: torch.Tensor,
              beta: float = 1.0 / 9.0) -> torch.Tensor:
    """Per-RoI smooth-L1 over the 4 deltas, zero for non-positive RoIs."""
    per = F.smooth_l1_loss(pred_deltas, target_deltas, beta=beta, reduction="none").sum(dim=1)
    return torch.where(positive, per, torch.zeros_like(per))


def loss_mask(mask_logits: torch.Tensor, target_masks: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-RoI mean binary cross-entropy on the target-class channel.

    ``mask_logits`` is ``(K, C, m, m)``; ``target_masks`` ``(K, m, m)``;
    ``labels`` ``(K,)`` selects the channel.
    """
    if mask_logits.shape[0] == 0:
        return mask_logits.new_zeros((0,))
    chosen = mask_logits[torch.arange(mask_logits.shape[0]), labels]
    return F.binary_cross_entropy_with_logits(chosen, target_masks, reduction="none").flatten(1).mean(dim=1)


def loss_total(depth: torch.Tensor, cls: torch.Tensor, bbox: torch.Tensor, mask: torch.Tensor,
               vol: torch.Tensor, positive: torch.Tensor | None = None,
               rpn_cls=None, rpn_bbox=None) -> LossBreakdown:
    """Assemble one image's breakdown.

    ``cls`` holds one term per sampled RoI. With ``positive`` given, ``bbox``,
    ``mask`` and ``vol`` are per sampled RoI as well and are gated by it;
    otherwise they are taken as already restricted to the positive RoIs.
    """
    if positive is not None:
        bbox = torch.where(positive, bbox, torch.zeros_like(bbox))
        mask = mask[positive]
        vol = vol[positive]
    zero = depth.new_zeros(())
    parts = dict(cls=cls.sum() if cls.numel() else zero, bbox=bbox.sum() if bbox.numel() else zero,
                 mask=mask.sum() if mask.numel() else zero, vol=vol.sum() if vol.numel() else zero)
    total = depth.sum() + parts["cls"] + parts["bbox"] + parts["mask"] + parts["vol"]
    n_rois = max(cls.numel(), 1)
    n_pos = max(mask.numel(), 1)
    normalized = depth.sum() + (parts["cls"] + parts["bbox"]) / n_rois + (parts["mask"] + parts["vol"]) / n_pos
    return LossBreakdown(
        depth=list(depth.unbind(0)), total=total, normalized=normalized,
        rpn_cls=zero if rpn_cls is None else rpn_cls, rpn_bbox=zero if rpn_bbox is None else rpn_bbox,
        **parts,
    )


def rpn_losses(objectness: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor,
               target_deltas: torch.Tensor, beta: float = 1.0 / 9.0):
    """Proposal-stage losses for one image.

    ``labels`` holds 1 (positive), 0 (negative) or -1 (ignored) per anchor.
    Both terms are normalized by the number of sampled anchors.
    """
    sampled = labels >= 0
    n = sampled.sum().clamp(min=1)
    cls = F.binary_cross_entropy_with_logits(objectness[sampled], labels[sampled].to(objectness.dtype), reduction="sum") / n
    pos = labels == 1
    box = F.smooth_l1_loss(deltas[pos], target_deltas[pos], beta=beta, reduction="sum") / n
    return cls, box
