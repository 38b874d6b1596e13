"""Multi-scale edge-based U-shape network for salient object detection."""

__version__ = "0.1.0"
