"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .dataset import DatasetError, Sample


def check_rgb(image, size: int | None = None) -> np.ndarray:
    """Return ``image`` as a contiguous uint8 ``(H, W, 3)`` array, optionally of side ``size``."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and np.all(np.isfinite(arr)) and arr.min() >= 0 and arr.max() <= 1:
            arr = np.rint(arr * 255).astype(np.uint8)
        else:
            raise ValueError(f"expected uint8 pixels (or floats in [0, 1]), got {arr.dtype}")
    if size is not None and arr.shape[:2] != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {arr.shape[0]}x{arr.shape[1]}")
    return np.ascontiguousarray(arr)


def check_images(images, size: int | None = None) -> list:
    """Accept one image, a batch array or a sequence of images / samples; return a list of RGB arrays."""
    if isinstance(images, Sample):
        images = [images]
    elif isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    out = [check_rgb(im.rgb if isinstance(im, Sample) else im, size) for im in images]
    if not out:
        raise ValueError("no images given")
    return out


def check_samples(samples, size: int | None = None) -> list:
    """Validate a non-empty sequence of annotated samples."""
    samples = [samples] if isinstance(samples, Sample) else list(samples)
    if not samples:
        raise DatasetError("no samples given")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample objects, got {type(s).__name__}")
        s.validate()
        if size is not None and s.size != (size, size):
            raise DatasetError(f"sample {s.name} is {s.size[0]}x{s.size[1]}, network expects {size}x{size}")
    return samples


def check_scalar(value, name: str, kind=numbers.Real, min_val=None, max_val=None, include_min=True):
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {kind.__name__}, got {type(value).__name__}")
    if min_val is not None and (value < min_val if include_min else value <= min_val):
        raise ValueError(f"{name} must be {'>=' if include_min else '>'} {min_val}, got {value}")
    if max_val is not None and value > max_val:
        raise ValueError(f"{name} must be <= {max_val}, got {value}")
    return value
