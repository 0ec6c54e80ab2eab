"""The multi-task meal network: pyramid, depth branch, proposals and RoI heads."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry import DEFAULT_CAMERA, CameraIntrinsics, DepthMap, PointCloud, back_project_tensor
from ..losses import (
    LossBreakdown,
    LossConfig,
    loss_bbox,
    loss_cls,
    loss_depth,
    loss_mask,
    loss_total,
    loss_volume,
    rpn_losses,
)
from .backbone import DepthDecoder, FeaturePyramid, ResidualFPN
from .boxes import batched_nms, clip_boxes, decode, encode, nms, order_by_score
from .config import ModelConfig
from .heads import BoxHead, MaskHead, RPNHead, VolumeHead
from .roi import roi_resize
from .targets import assign_targets, label_anchors, make_anchors, mask_targets, sample_rois

ML_PER_LITER = 1000.0


class StructureError(ValueError):
    pass


@dataclass
class RoI:
    bbox: tuple  # normalized (x0, y0, x1, y1)
    score: float


@dataclass
class Detection:
    class_id: int  # food class id, background excluded
    score: float
    bbox: tuple  # pixels (x0, y0, x1, y1)
    mask: np.ndarray
    volume_ml: float


@dataclass
class NetworkOutputs:
    depth_predictions: list  # 4 DepthMaps, smallest first
    point_cloud: PointCloud
    detections: list = field(default_factory=list)
    inference_seconds: float = 0.0


@dataclass
class ImageTargets:
    """Ground truth of one image in network units (pixels, liters)."""

    boxes: torch.Tensor  # (n, 4) pixel boxes
    classes: torch.Tensor  # (n,) food class ids
    masks: torch.Tensor  # (n, H, W) bool
    volumes_l: torch.Tensor  # (n,)


def sample_targets(sample) -> ImageTargets:
    """Ground truth of a dataset ``Sample``; boxes use exclusive right/bottom edges."""
    inst = sample.instances
    return ImageTargets(
        boxes=torch.tensor([list(i.bbox) for i in inst], dtype=torch.float32).reshape(-1, 4),
        classes=torch.tensor([i.class_id for i in inst], dtype=torch.long),
        masks=torch.from_numpy(np.stack([i.mask for i in inst])) if inst else torch.zeros((0,) + sample.size, dtype=torch.bool),
        volumes_l=torch.tensor([i.volume_ml / ML_PER_LITER for i in inst], dtype=torch.float32),
    )


def depth_tensor(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.depth_gt.values for s in samples])[:, None]).float()


def to_input(rgb) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` or ``(B, H, W, 3)`` images to a normalized float batch."""
    x = torch.from_numpy(np.array(rgb))  # copy: decoded images may be read-only
    if x.dim() == 3:
        x = x[None]
    # contiguous NCHW: channels-last inputs crash conv backward on narrow layers in some CPU builds
    return ((x.permute(0, 3, 1, 2).float() / 255.0 - 0.5) / 0.25).contiguous()


class MealNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), loss_config: LossConfig = LossConfig(),
                 camera: CameraIntrinsics = DEFAULT_CAMERA):
        super().__init__()
        self.config = config
        self.loss_config = loss_config
        self.camera = camera
        c = config
        self.backbone = ResidualFPN(c.backbone_widths, c.backbone_blocks, c.fpn_channels)
        self.depth = DepthDecoder(c.fpn_channels, c.depth_channels, c.input_size)
        self.rpn = RPNHead(c.cloud_channels, c.anchors_per_location, width=c.fpn_channels)
        self.box_head = BoxHead(c.cloud_channels, c.roi_feature_size, c.num_classes, c.box_head_width)
        self.mask_head = MaskHead(c.cloud_channels, c.num_classes, c.mask_head_width, c.mask_head_convs)
        self.volume_head = VolumeHead(c.cloud_channels, c.volume_roi_size, c.volume_head_width, c.volume_init_liters,
                                       c.volume_output_scale)
        self._scale_norm_convs(c.norm_conv_init_gain)
        self.register_buffer(
            "anchors",
            make_anchors(c.anchor_sizes, c.anchor_scales, c.aspect_ratios, c.pyramid_strides, c.input_size),
            persistent=False,
        )

    def _scale_norm_convs(self, gain: float):
        """Shrink the initial weights of backbone and decoder convolutions that feed a batch norm.

        Batch norm makes such a layer invariant to its weight scale, so smaller
        weights take proportionally larger relative steps at a fixed learning rate.
        """
        with torch.no_grad():
            for module in (self.backbone, self.depth):
                for m in module.modules():
                    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is None:
                        m.weight.mul_(gain)

    # ------------------------------------------------------------------ stages

    def extract_features(self, x: torch.Tensor) -> FeaturePyramid:
        if x.dim() != 4 or x.shape[1] != 3:
            raise StructureError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[-1] != x.shape[-2] or x.shape[-1] != self.config.input_size:
            raise StructureError(
                f"input must be square with side {self.config.input_size}, got {tuple(x.shape[-2:])}"
            )
        return self.backbone(x)

    def depth_logits(self, pyramid: FeaturePyramid) -> list:
        return self.depth(pyramid)

    def predict_depth(self, pyramid: FeaturePyramid) -> list:
        """Four sigmoid depth maps (m), smallest first."""
        return [torch.sigmoid(z) for z in self.depth_logits(pyramid)]

    def point_cloud(self, depths: list) -> torch.Tensor:
        """Back-project the largest depth scale only."""
        return back_project_tensor(depths[-1], self.camera)

    def augment_with_cloud(self, pyramid: FeaturePyramid, cloud: torch.Tensor) -> FeaturePyramid:
        """Append the 3 point-cloud channels, average-pooled to every level."""
        levels = []
        for lvl in pyramid.levels:
            factor = cloud.shape[-1] // lvl.shape[-1]
            pooled = cloud if factor == 1 else F.avg_pool2d(cloud, factor)
            levels.append(torch.cat([lvl, pooled], dim=1))
        return FeaturePyramid(levels, pyramid.strides)

    def rpn_outputs(self, pyramid: FeaturePyramid):
        return self.rpn(pyramid.levels)

    def proposals(self, scores: torch.Tensor, deltas: torch.Tensor, post_nms: int):
        """Top ``rpn_proposals`` anchors by objectness, decoded, NMS'd, cut to ``post_nms``.

        Works on one image; returns pixel boxes and objectness probabilities.
        """
        c = self.config
        with torch.no_grad():
            order = order_by_score(scores)[: c.rpn_proposals]
            boxes = clip_boxes(decode(self.anchors[order], deltas[order]), c.input_size)
            probs = torch.sigmoid(scores[order])
            wh = boxes[:, 2:] - boxes[:, :2]
            ok = (wh > 1.0).all(dim=1)
            boxes, probs = boxes[ok], probs[ok]
            keep = nms(boxes, probs, c.nms_threshold, limit=post_nms)
        return boxes[keep], probs[keep]

    def propose_rois(self, pyramid: FeaturePyramid) -> list:
        """Inference-time candidates per image as normalized ``RoI`` records."""
        scores, deltas = self.rpn_outputs(pyramid)
        out = []
        for b in range(scores.shape[0]):
            boxes, probs = self.proposals(scores[b], deltas[b], self.config.kept_candidates)
            norm = (boxes / self.config.input_size).tolist()
            out.append([RoI(tuple(bx), float(p)) for bx, p in zip(norm, probs)])
        return out

    def roi_patches(self, pyramid: FeaturePyramid, boxes: torch.Tensor, batch_index: torch.Tensor, size: int):
        return roi_resize(pyramid.levels, boxes, batch_index, self.config.input_size, size)

    # ------------------------------------------------------------------ training

    def forward_train(self, x: torch.Tensor, targets: list, generator: torch.Generator | None = None,
                      depth_gt: torch.Tensor | None = None) -> LossBreakdown:
        """Mean loss breakdown over the batch; ``depth_gt`` is ``(B, 1, S, S)`` meters."""
        c = self.config
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        pyramid = self.extract_features(x)
        depths = self.predict_depth(pyramid)
        aug = self.augment_with_cloud(pyramid, self.point_cloud(depths))
        scores, deltas = self.rpn_outputs(aug)

        depth_terms = loss_depth(depths, depth_gt) if depth_gt is not None else x.new_zeros(4)
        per_image = []
        rois, batch_idx, img_targets = [], [], []
        for b, tgt in enumerate(targets):
            labels, tdeltas = label_anchors(self.anchors, tgt.boxes, c.rpn_positive_iou, c.rpn_negative_iou,
                                            c.rpn_batch, generator)
            r_cls, r_box = rpn_losses(scores[b], deltas[b], labels, tdeltas)
            props, _ = self.proposals(scores[b], deltas[b], c.rpn_train_post_nms)
            props = torch.cat([props, tgt.boxes])
            assigned = assign_targets(props, tgt.boxes, tgt.classes, c.iou_positive_threshold)
            idx = sample_rois(assigned, c.roi_batch, c.roi_positive_fraction, generator)
            rois.append(props[idx])
            batch_idx.append(torch.full((idx.numel(),), b, dtype=torch.long))
            img_targets.append((assigned.matched[idx], assigned.positive[idx], assigned.labels[idx]))
            per_image.append((r_cls, r_box))

        all_rois = torch.cat(rois)
        all_b = torch.cat(batch_idx)
        logits, box_deltas = self.box_head(self.roi_patches(aug, all_rois, all_b, c.roi_feature_size))
        pos_all = torch.cat([t[1] for t in img_targets])
        labels_all = torch.cat([t[2] for t in img_targets])
        pos_rois = all_rois[pos_all]
        pos_b = all_b[pos_all]
        mask_logits = self.mask_head(self.roi_patches(aug, pos_rois, pos_b, c.mask_roi_size))
        soft = torch.sigmoid(mask_logits[torch.arange(pos_rois.shape[0]), labels_all[pos_all]])
        v_hat = self.volume_head(self.roi_patches(aug, pos_rois, pos_b, c.volume_roi_size), soft)

        out = []
        start = 0
        pos_start = 0
        for b, tgt in enumerate(targets):
            matched, positive, labels = img_targets[b]
            n = labels.numel()
            n_pos = int(positive.sum())
            sl = slice(start, start + n)
            psl = slice(pos_start, pos_start + n_pos)
            start += n
            pos_start += n_pos
            img_rois = all_rois[sl]
            cls_terms = loss_cls(logits[sl], labels)
            if tgt.boxes.shape[0]:
                t_deltas = encode(img_rois, tgt.boxes[matched.clamp(min=0)])
            else:
                t_deltas = torch.zeros_like(img_rois)
            chosen = box_deltas[sl][torch.arange(n), labels]
            box_terms = loss_bbox(chosen, t_deltas, positive, self.loss_config.smooth_l1_beta)
            pos_matched = matched[positive]
            if n_pos:
                m_t = mask_targets(tgt.masks, pos_matched, img_rois[positive], c.input_size, c.mask_size)
                mask_terms = loss_mask(mask_logits[psl], m_t, labels[positive])
                vol_terms = loss_volume(v_hat[psl], tgt.volumes_l[pos_matched], self.loss_config)
            else:
                mask_terms = vol_terms = x.new_zeros((0,))
            r_cls, r_box = per_image[b]
            d = depth_terms if depth_gt is None else loss_depth([p[b:b + 1] for p in depths], depth_gt[b:b + 1])
            out.append(loss_total(d, cls_terms, box_terms, mask_terms, vol_terms, rpn_cls=r_cls, rpn_bbox=r_box))
        return LossBreakdown.mean(out)

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def forward_infer(self, rgb) -> list:
        """Run the whole pipeline on uint8 image(s); one ``NetworkOutputs`` per image."""
        c = self.config
        t0 = time.perf_counter()
        x = to_input(rgb) if not torch.is_tensor(rgb) else rgb
        pyramid = self.extract_features(x)
        depths = self.predict_depth(pyramid)
        cloud = self.point_cloud(depths)
        aug = self.augment_with_cloud(pyramid, cloud)
        scores, deltas = self.rpn_outputs(aug)
        results = []
        for b in range(x.shape[0]):
            boxes, _ = self.proposals(scores[b], deltas[b], c.kept_candidates)
            dets = self._detect(aug, boxes, b)
            results.append(
                NetworkOutputs(
                    depth_predictions=[DepthMap(d[b, 0].double().numpy()) for d in depths],
                    point_cloud=PointCloud(cloud[b].permute(1, 2, 0).double().numpy()),
                    detections=dets,
                )
            )
        elapsed = time.perf_counter() - t0
        for r in results:
            r.inference_seconds = elapsed / len(results)
        return results

    def _detect(self, aug: FeaturePyramid, boxes: torch.Tensor, b: int) -> list:
        c = self.config
        if boxes.shape[0] == 0:
            return []
        bidx = torch.full((boxes.shape[0],), b, dtype=torch.long)
        logits, deltas = self.box_head(self.roi_patches(aug, boxes, bidx, c.roi_feature_size))
        probs = F.softmax(logits, dim=1)
        n, k = probs.shape
        refined = decode(boxes.repeat_interleave(k, 0), deltas.reshape(-1, 4)).reshape(n, k, 4)
        refined = clip_boxes(refined, c.input_size)[:, 1:].reshape(-1, 4)
        cls_scores = probs[:, 1:].reshape(-1)
        labels = torch.arange(1, k).repeat(n)
        wh = refined[:, 2:] - refined[:, :2]
        ok = (cls_scores > c.detection_score_threshold) & (wh > 1.0).all(dim=1)
        refined, cls_scores, labels = refined[ok], cls_scores[ok], labels[ok]
        keep = batched_nms(refined, cls_scores, labels, c.detection_nms_threshold, limit=c.kept_candidates)
        refined, cls_scores, labels = refined[keep], cls_scores[keep], labels[keep]
        if refined.shape[0] == 0:
            return []
        bidx = torch.full((refined.shape[0],), b, dtype=torch.long)
        mask_logits = self.mask_head(self.roi_patches(aug, refined, bidx, c.mask_roi_size))
        soft = torch.sigmoid(mask_logits[torch.arange(refined.shape[0]), labels])
        volumes = self.volume_head(self.roi_patches(aug, refined, bidx, c.volume_roi_size), soft).clamp(min=0)
        masks = paste_masks(soft, refined, c.input_size)
        return [
            Detection(int(lab) - 1, float(s), tuple(float(v) for v in bx), m, float(vol) * ML_PER_LITER)
            for lab, s, bx, m, vol in zip(labels, cls_scores, refined, masks, volumes)
        ]


def paste_masks(probs: torch.Tensor, boxes: torch.Tensor, size: int, threshold: float = 0.5) -> list:
    """Place ``(K, m, m)`` box-relative mask probabilities into ``size x size`` binary masks.

    Only pixels whose centers fall inside the box can be set.
    """
    out = []
    centers = torch.arange(size, dtype=torch.float32) + 0.5
    for p, (x0, y0, x1, y1) in zip(probs, boxes.tolist()):
        m = np.zeros((size, size), dtype=bool)
        cols = ((centers >= x0) & (centers < x1)).nonzero().flatten()
        rows = ((centers >= y0) & (centers < y1)).nonzero().flatten()
        if cols.numel() and rows.numel() and x1 > x0 and y1 > y0:
            tx = (centers[cols] - x0) / (x1 - x0) * 2 - 1
            ty = (centers[rows] - y0) / (y1 - y0) * 2 - 1
            gy, gx = torch.meshgrid(ty, tx, indexing="ij")
            grid = torch.stack([gx, gy], dim=-1)[None]
            vals = F.grid_sample(p[None, None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0, 0]
            sub = (vals >= threshold).numpy()
            m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = sub
        out.append(m)
    return out
