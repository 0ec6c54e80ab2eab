from .config import ConfigError, ModelConfig
from .network import Detection, ImageTargets, MealNet, NetworkOutputs, RoI, StructureError, paste_masks, to_input

__all__ = [
    "ConfigError",
    "ModelConfig",
    "Detection",
    "ImageTargets",
    "MealNet",
    "NetworkOutputs",
    "RoI",
    "StructureError",
    "paste_masks",
    "to_input",
]
