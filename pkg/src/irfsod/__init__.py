"""Instant-response few-shot object detection.

A two-stage detector trained once on base categories that detects novel
categories directly from a handful of support boxes: semi-supervised RPN
labeling captures unannotated foreground, a parameter-free distance head
replaces the learned classifier at inference, and localization leans on
pixel-wise feature contrast instead of category-specific fitting.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .geometry import Box, BoxDelta, Detection

__all__ = ["RunConfig", "Box", "BoxDelta", "Detection", "__version__"]
