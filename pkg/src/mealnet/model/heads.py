from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class RPNHead(nn.Module):
    """Shared objectness / box-delta head applied to every pyramid level."""

    def __init__(self, in_channels, num_anchors, width=64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.objectness = nn.Conv2d(width, num_anchors, 1)
        self.deltas = nn.Conv2d(width, 4 * num_anchors, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, levels):
        scores, deltas = [], []
        for x in levels:
            t = F.relu(self.conv(x))
            b, _, h, w = t.shape
            scores.append(self.objectness(t).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.deltas(t).permute(0, 2, 3, 1).reshape(b, -1, 4))
        return torch.cat(scores, dim=1), torch.cat(deltas, dim=1)


class BoxHead(nn.Module):
    """Two dense layers, then class logits and per-class box deltas."""

    def __init__(self, in_channels, roi_size, num_classes, width=256):
        super().__init__()
        self.fc1 = nn.Linear(in_channels * roi_size * roi_size, width)
        self.fc2 = nn.Linear(width, width)
        self.cls = nn.Linear(width, num_classes)
        self.bbox = nn.Linear(width, num_classes * 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.bbox.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.bbox.bias)
        self.num_classes = num_classes

    def forward(self, patch):
        x = F.relu(self.fc1(patch.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.bbox(x).reshape(-1, self.num_classes, 4)


class MaskHead(nn.Module):
    """Small FCN emitting one mask logit grid per class at twice the patch size."""

    def __init__(self, in_channels, num_classes, width=64, convs=2):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(convs):
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU(inplace=True)]
            cin = width
        self.convs = nn.Sequential(*layers)
        self.up = nn.ConvTranspose2d(width, width, 2, stride=2)
        self.logits = nn.Conv2d(width, num_classes, 1)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, patch):
        x = self.convs(patch)
        x = F.relu(self.up(x))
        return self.logits(x)


class VolumeHead(nn.Module):
    """Regresses one volume per RoI from its features and its soft mask.

    conv k7 -> BN -> ReLU -> avg-pool k2 -> conv k1 -> BN -> ReLU -> dense.
    The dense output times ``output_scale`` is the volume in liters. The
    scale damps the update of the output, whose loss gradient (about
    ``1 / v*``) is large for plate-sized volumes.
    """

    def __init__(self, in_channels, roi_size, width=256, init_liters=0.04, output_scale=1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels + 1, width, 7, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.pool = nn.AvgPool2d(2)
        self.conv2 = nn.Conv2d(width, width, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.dense = nn.Linear(width * (roi_size // 2) ** 2, 1)
        self.roi_size = roi_size
        self.output_scale = output_scale
        nn.init.normal_(self.dense.weight, std=1e-4 / output_scale)
        nn.init.constant_(self.dense.bias, init_liters / output_scale)

    def forward(self, patch, soft_mask):
        """``patch``: ``(K, C, s, s)``; ``soft_mask``: ``(K, m, m)`` probabilities, resized to ``s``."""
        if soft_mask.shape[-1] != self.roi_size:
            soft_mask = F.interpolate(soft_mask[:, None], size=(self.roi_size, self.roi_size),
                                      mode="bilinear", align_corners=False)[:, 0]
        x = torch.cat([patch, soft_mask[:, None]], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.pool(x)
        x = F.relu(self.bn2(self.conv2(x)))
        return self.dense(x.flatten(1))[:, 0] * self.output_scale
