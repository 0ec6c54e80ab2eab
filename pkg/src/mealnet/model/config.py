from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the multi-task network.

    Defaults are desk scale. ``reference_scale()`` returns the wider variant
    (256-channel pyramid, 1024-channel volume head).
    """

    input_size: int = 256
    num_classes: int = 7  # 6 foods + background (index 0)
    backbone_widths: tuple = (32, 64, 128, 256)
    backbone_blocks: int = 2
    fpn_channels: int = 64
    depth_channels: int = 16
    depth_scales: tuple = (32, 64, 128, 256)
    anchor_sizes: tuple = (12.0, 24.0, 48.0, 96.0)
    anchor_scales: tuple = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_proposals: int = 1000
    rpn_train_post_nms: int = 256
    kept_candidates: int = 50
    nms_threshold: float = 0.7
    rpn_batch: int = 256
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    iou_positive_threshold: float = 0.7
    roi_batch: int = 64
    roi_positive_fraction: float = 0.25
    roi_feature_size: int = 7
    mask_roi_size: int = 14
    mask_size: int = 28
    volume_roi_size: int = 8
    box_head_width: int = 256
    mask_head_width: int = 64
    mask_head_convs: int = 2
    volume_head_width: int = 256
    volume_init_liters: float = 0.04
    volume_output_scale: float = 0.003
    norm_conv_init_gain: float = 0.3
    detection_score_threshold: float = 0.5
    detection_nms_threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    @property
    def pyramid_strides(self) -> tuple:
        return (4, 8, 16, 32)

    @property
    def cloud_channels(self) -> int:
        return self.fpn_channels + 3

    @property
    def anchors_per_location(self) -> int:
        return len(self.anchor_scales) * len(self.aspect_ratios)

    def validate(self):
        s = self.depth_scales
        if len(s) != 4:
            raise ConfigError(f"exactly 4 depth scales required, got {len(s)}")
        if any(b != 2 * a for a, b in zip(s, s[1:])):
            raise ConfigError(f"depth scales must double at each step, got {s}")
        if s[-1] != self.input_size:
            raise ConfigError(f"largest depth scale {s[-1]} must equal input size {self.input_size}")
        if self.input_size % 32:
            raise ConfigError(f"input size must be a multiple of 32, got {self.input_size}")
        if not 0 < self.iou_positive_threshold < 1:
            raise ConfigError("iou_positive_threshold must lie in (0, 1)")
        if self.num_classes < 2:
            raise ConfigError("num_classes counts background and needs at least one food class")
        if len(self.backbone_widths) != 4 or len(self.anchor_sizes) != 4:
            raise ConfigError("backbone and anchors are defined for exactly 4 pyramid levels")
        if self.volume_roi_size % 2:
            raise ConfigError("volume_roi_size must be even (the head pools by 2)")
        if not self.norm_conv_init_gain > 0:
            raise ConfigError("norm_conv_init_gain must be positive")
        if self.kept_candidates > self.rpn_proposals:
            raise ConfigError("kept_candidates cannot exceed rpn_proposals")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    @classmethod
    def reference_scale(cls, **overrides) -> "ModelConfig":
        base = dict(fpn_channels=256, depth_channels=256, volume_head_width=1024,
                    box_head_width=1024, mask_head_width=256, mask_head_convs=4)
        base.update(overrides)
        return cls(**base)
