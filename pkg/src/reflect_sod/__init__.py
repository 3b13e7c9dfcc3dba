"""Symmetrical FCN for salient object detection with reciprocal image input."""

__version__ = "0.1.0"
