"""Box, window, and tube primitives shared by the generator, trainer, and evaluator.

Boxes are axis-aligned and normalized to [0, 1] relative to the frame, in one
of two formats: ``corner`` (x1, y1, x2, y2) or ``center`` (cx, cy, w, h).
Windows are [start, end] in seconds. A tube is a window plus one box per frame
index covered by that window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

from .errors import DataError

CORNER = "corner"
CENTER = "center"

# Guards floor(t * fps) against products that land a hair below an integer.
_FRAME_EPS = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    """One axis-aligned box with an explicit format tag."""

    coords: tuple[float, float, float, float]
    fmt: str = CORNER

    def __post_init__(self) -> None:
        if self.fmt not in (CORNER, CENTER):
            raise DataError(f"unknown box format {self.fmt!r}")
        if len(self.coords) != 4 or not all(math.isfinite(c) for c in self.coords):
            raise DataError(f"box coords must be 4 finite reals, got {self.coords}")
        a, b, c, d = self.coords
        if self.fmt == CORNER:
            if c < a or d < b:
                raise DataError(f"corner box has negative extent: {self.coords}")
        else:
            if c < 0 or d < 0:
                raise DataError(f"center box has negative size: {self.coords}")

    @classmethod
    def from_corner(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((float(x1), float(y1), float(x2), float(y2)), CORNER)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls((float(cx), float(cy), float(w), float(h)), CENTER)

    def as_corner(self) -> tuple[float, float, float, float]:
        if self.fmt == CORNER:
            return self.coords
        cx, cy, w, h = self.coords
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_center(self) -> tuple[float, float, float, float]:
        if self.fmt == CENTER:
            return self.coords
        x1, y1, x2, y2 = self.coords
        return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.as_corner()
        return (x2 - x1) * (y2 - y1)


def box_convert(box: BoundingBox, fmt: str) -> BoundingBox:
    """Return ``box`` re-expressed in ``fmt`` (corner or center)."""
    if fmt == box.fmt:
        return box
    if fmt == CORNER:
        return BoundingBox(box.as_corner(), CORNER)
    if fmt == CENTER:
        return BoundingBox(box.as_center(), CENTER)
    raise DataError(f"unknown box format {fmt!r}")


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes.

    A zero-area box has IoU 0 against everything except a coordinate-identical
    box, which scores 1 (so a degenerate gt matched exactly is not penalized).
    """
    ax1, ay1, ax2, ay2 = a.as_corner()
    bx1, by1, bx2, by2 = b.as_corner()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if (ax1, ay1, ax2, ay2) == (bx1, by1, bx2, by2) else 0.0
    return inter / union


def box_giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus the enclosing-box penalty, in (-1, 1]."""
    ax1, ay1, ax2, ay2 = a.as_corner()
    bx1, by1, bx2, by2 = b.as_corner()
    ew = max(ax2, bx2) - min(ax1, bx1)
    eh = max(ay2, by2) - min(ay1, by1)
    enclose = ew * eh
    if enclose <= 0.0:
        # Both boxes collapse to the same point or segment; identity rule.
        return 1.0 if (ax1, ay1, ax2, ay2) == (bx1, by1, bx2, by2) else 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    iou = inter / union if union > 0.0 else 0.0
    return iou - (enclose - union) / enclose


@dataclass(frozen=True)
class TemporalWindow:
    """A [start, end] interval in seconds, start <= end, both >= 0."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise DataError(f"window bounds must be finite, got [{self.start}, {self.end}]")
        if self.start < 0 or self.end < self.start:
            raise DataError(f"invalid window [{self.start}, {self.end}]")

    @property
    def duration(self) -> float:
        return self.end - self.start


def temporal_iou(a: TemporalWindow, b: TemporalWindow) -> float:
    """Interval IoU in seconds; two identical instants score 1, disjoint 0."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    union = max(a.end, b.end) - min(a.start, b.start)
    if union <= 0.0:
        return 1.0 if (a.start, a.end) == (b.start, b.end) else 0.0
    return max(0.0, inter) / union


def window_frames(window: TemporalWindow, fps: float, n_frames: int | None = None) -> range:
    """Frame indices covered by a window: floor(start*fps) .. floor(end*fps) inclusive.

    This is the one frame-set convention shared by the generator, trainer, and
    evaluator. With ``n_frames`` given, the range is clamped to valid indices
    (a window ending exactly at the video duration would otherwise name one
    frame past the end).
    """
    first = int(math.floor(window.start * fps + _FRAME_EPS))
    last = int(math.floor(window.end * fps + _FRAME_EPS))
    if n_frames is not None:
        first = max(first, 0)
        last = min(last, n_frames - 1)
    return range(first, last + 1)


@dataclass
class Tube:
    """A temporal window plus one box per covered frame index."""

    window: TemporalWindow
    boxes: Dict[int, BoundingBox] = field(default_factory=dict)

    def validate(self, fps: float, n_frames: int | None = None) -> None:
        """Check the box keys are exactly the window's frame set."""
        expected = set(window_frames(self.window, fps, n_frames))
        got = set(self.boxes)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise DataError(
                f"tube boxes do not match window frames: missing={missing} extra={extra}"
            )
