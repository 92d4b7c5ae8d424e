"""Desk-scale spatio-temporal video grounding.

A toy multimodal causal transformer reads interleaved frame-pair features and
timestamp text, answers a grounding query with a temporal window, and hands a
small set of bridging queries to a query-conditioned spatial decoder that
boxes the target on every frame inside the window.
"""

from .errors import DataError, NumericError
from .geometry import (
    BoundingBox,
    TemporalWindow,
    Tube,
    box_convert,
    box_giou,
    box_iou,
    temporal_iou,
    window_frames,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "TemporalWindow",
    "Tube",
    "DataError",
    "NumericError",
    "box_convert",
    "box_giou",
    "box_iou",
    "temporal_iou",
    "window_frames",
    "__version__",
]
