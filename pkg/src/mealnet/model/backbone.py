"""Residual backbone with a feature pyramid, and the depth decoder that rides on it."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FeaturePyramid:
    """Feature maps at strides 4, 8, 16, 32 with a common channel width."""

    levels: list
    strides: tuple = (4, 8, 16, 32)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def sizes(self) -> list:
        return [lvl.shape[-1] for lvl in self.levels]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def conv_bn(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity, inplace=True)


class ResidualFPN(nn.Module):
    """Four residual stages fused top-down into a uniform-width pyramid."""

    def __init__(self, widths=(32, 64, 128, 256), blocks=2, fpn_channels=64):
        super().__init__()
        self.stem = nn.Sequential(conv_bn(3, widths[0], stride=2), conv_bn(widths[0], widths[0], stride=2))
        stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            layers = [BasicBlock(cin, w, stride=1 if i == 0 else 2)]
            layers += [BasicBlock(w, w) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(w, fpn_channels, 1) for w in widths)
        self.smooth = nn.ModuleList(nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1) for _ in widths)

    def forward(self, x) -> FeaturePyramid:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        top = self.lateral[-1](feats[-1])
        outs = [self.smooth[-1](top)]
        for i in range(len(feats) - 2, -1, -1):
            top = self.lateral[i](feats[i]) + F.interpolate(top, scale_factor=2.0, mode="nearest")
            outs.insert(0, self.smooth[i](top))
        return FeaturePyramid(outs)


class DepthDecoder(nn.Module):
    """Encoder-decoder depth branch with skips from the pyramid and side outputs.

    Starting from the stride-32 level, each stage doubles resolution with a
    3x3 deconvolution (+BN+ReLU). Where a pyramid level of matching size
    exists its features are concatenated and fused by a 3x3 convolution. A
    sigmoid side prediction is emitted at each of the last four stages, which
    bounds depth to [0, 1] m.
    """

    def __init__(self, fpn_channels=64, channels=32, input_size=256):
        super().__init__()
        self.input_size = input_size
        n_up = 5  # stride 32 -> 1
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleDict()
        cin = fpn_channels
        for i in range(n_up):
            self.up.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cin, channels, 3, stride=2, padding=1, output_padding=1, bias=False),
                    nn.BatchNorm2d(channels),
                    nn.ReLU(inplace=True),
                )
            )
            stride = 32 >> (i + 1)
            if stride >= 4:
                self.fuse[str(stride)] = conv_bn(channels + fpn_channels, channels)
            cin = channels
        self.predict = nn.ModuleList(nn.Conv2d(channels, 1, 3, padding=1) for _ in range(4))
        for p in self.predict:
            nn.init.constant_(p.bias, -0.2)  # sigmoid(-0.2) ~ 0.45 m

    def forward(self, pyramid: FeaturePyramid) -> list:
        by_stride = dict(zip(pyramid.strides, pyramid.levels))
        x = by_stride[32]
        logits = []
        for i, up in enumerate(self.up):
            x = up(x)
            stride = 32 >> (i + 1)
            if str(stride) in self.fuse:
                x = self.fuse[str(stride)](torch.cat([x, by_stride[stride]], dim=1))
            if i >= 1:
                logits.append(self.predict[i - 1](x))
        return logits
