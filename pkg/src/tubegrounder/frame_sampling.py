"""Frame pairing for the substrate and P/N frame sampling for spatial training.

Consecutive frames are fused two at a time into one grid of pair tokens; an
odd trailing frame is duplicated into its own pair so every frame is covered.
During training the spatial decoder sees a mix of positive frames (inside the
gt window, with a box target) and negative frames (outside, objectness-only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import DataError
from .geometry import BoundingBox, TemporalWindow
from .synthdata import VideoSample

# Named positive:negative budgets studied in the sampling ablation.
RATIO_PRESETS: Dict[str, Tuple[int, int]] = {
    "10:0": (10, 0),
    "8:2": (8, 2),
    "5:5": (5, 5),
    "2:8": (2, 8),
}


@dataclass
class FramePair:
    """Two consecutive frames fused into one temporal token grid."""

    index: int
    frames: np.ndarray  # [2, H, W, feature_dim]
    interval: TemporalWindow

    @property
    def duplicated(self) -> bool:
        return bool(np.shares_memory(self.frames[0], self.frames[1])) or np.array_equal(
            self.frames[0], self.frames[1]
        )


def pair_frames(sample: VideoSample) -> List[FramePair]:
    """Split a sample into frame pairs; pair i covers [2i/fps, 2(i+1)/fps)."""
    n = sample.n_frames
    if n < 1:
        raise DataError(f"sample {sample.sample_id}: no frames to pair")
    pairs: List[FramePair] = []
    for i in range((n + 1) // 2):
        a = 2 * i
        b = min(a + 1, n - 1)  # odd trailing frame pairs with itself
        pairs.append(
            FramePair(
                index=i,
                frames=np.stack([sample.frames[a], sample.frames[b]]),
                interval=TemporalWindow(2 * i / sample.fps, 2 * (i + 1) / sample.fps),
            )
        )
    return pairs


@dataclass
class SampledFrame:
    frame_index: int
    positive: bool
    gt_box: BoundingBox | None  # None exactly when negative


@dataclass
class FrameBatch:
    frames: List[SampledFrame]

    @property
    def positives(self) -> List[SampledFrame]:
        return [f for f in self.frames if f.positive]

    @property
    def negatives(self) -> List[SampledFrame]:
        return [f for f in self.frames if not f.positive]


def pn_sample(
    sample: VideoSample,
    n_positive: int,
    n_negative: int,
    rng: np.random.Generator,
) -> FrameBatch:
    """Sample up to n_positive in-window and n_negative out-of-window frames.

    Uniform without replacement within each group; budgets clamp to what the
    video offers. A sample whose window covers no frame is a data error.
    """
    if n_positive < 0 or n_negative < 0:
        raise DataError("frame budgets must be non-negative")
    positive_pool = sorted(sample.gt.boxes)
    if not positive_pool:
        raise DataError(f"sample {sample.sample_id}: gt window covers no frame")
    negative_pool = [f for f in range(sample.n_frames) if f not in sample.gt.boxes]

    def draw(pool: List[int], budget: int) -> List[int]:
        take = min(budget, len(pool))
        if take == 0:
            return []
        return sorted(int(i) for i in rng.choice(pool, size=take, replace=False))

    chosen: List[SampledFrame] = [
        SampledFrame(f, True, sample.gt.boxes[f]) for f in draw(positive_pool, n_positive)
    ] + [SampledFrame(f, False, None) for f in draw(negative_pool, n_negative)]
    return FrameBatch(chosen)
