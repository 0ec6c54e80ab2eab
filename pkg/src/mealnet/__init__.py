"""Food recognition, segmentation and volume estimation from a single RGB image."""

__version__ = "0.1.0"
