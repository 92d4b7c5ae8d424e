"""Synthetic grounding scenes: planted signature vectors on a patch grid.

A scene is a stack of patch-feature frames. Background cells carry a fixed
background vector, one target object carries the signature named by the query
("find sig_k") during its event window, and distractor objects carry other
signatures. Gaussian noise controls difficulty. Because every ground-truth box
is derived from the planted cell masks, a noiseless scene is exactly
recoverable, which pins the ceiling for the whole pipeline.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import DataError
from .geometry import BoundingBox, TemporalWindow, Tube, window_frames

FORMAT_VERSION = 1
BACKGROUND_ID = -1

# Domain constant separating the signature-vector RNG stream from every other
# seeded stream in the package.
_SIG_STREAM = 0x51674E


def signature_vector(sig_id: int, dim: int) -> np.ndarray:
    """Deterministic unit-norm feature vector for a signature id.

    ``BACKGROUND_ID`` (-1) is the reserved background signature.
    """
    if sig_id < BACKGROUND_ID:
        raise DataError(f"signature id must be >= {BACKGROUND_ID}, got {sig_id}")
    rng = np.random.default_rng(np.random.SeedSequence([_SIG_STREAM, sig_id + 1]))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float64)


def covered_cells(box: BoundingBox, grid: Tuple[int, int]) -> Tuple[int, int, int, int] | None:
    """Inclusive (r0, r1, c0, c1) of cells whose center lies in the closed box."""
    h, w = grid
    x1, y1, x2, y2 = box.as_corner()
    c0 = math.ceil(x1 * w - 0.5 - 1e-9)
    c1 = math.floor(x2 * w - 0.5 + 1e-9)
    r0 = math.ceil(y1 * h - 0.5 - 1e-9)
    r1 = math.floor(y2 * h - 0.5 + 1e-9)
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, w - 1), min(r1, h - 1)
    if c0 > c1 or r0 > r1:
        return None
    return r0, r1, c0, c1


def cell_extent_box(r0: int, r1: int, c0: int, c1: int, grid: Tuple[int, int]) -> BoundingBox:
    """Tightest normalized box around an inclusive cell rectangle."""
    h, w = grid
    return BoundingBox.from_corner(c0 / w, r0 / h, (c1 + 1) / w, (r1 + 1) / h)


@dataclass
class SceneSpec:
    """Everything needed to render one scene deterministically."""

    scene_id: str
    duration: float
    event_window: TemporalWindow
    target_signature: int
    target_track: np.ndarray  # [n_frames, 4] center-form, normalized
    distractors: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    fps: float = 2.0
    grid: Tuple[int, int] = (8, 8)
    feature_dim: int = 32
    sigma: float = 0.05
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.fps + 1e-9))

    def validate(self) -> None:
        if self.duration <= 0:
            raise DataError(f"scene {self.scene_id}: nonpositive duration")
        if self.event_window.end > self.duration + 1e-9:
            raise DataError(f"scene {self.scene_id}: event window exceeds duration")
        if self.sigma < 0:
            raise DataError(f"scene {self.scene_id}: negative noise sigma")
        sig_ids = [self.target_signature] + [sid for sid, _ in self.distractors]
        if len(set(sig_ids)) != len(sig_ids):
            raise DataError(f"scene {self.scene_id}: signature ids must be distinct")
        if any(sid == BACKGROUND_ID for sid in sig_ids):
            raise DataError(f"scene {self.scene_id}: background id is reserved")
        tracks = [("target", self.target_track)] + [
            (f"distractor {sid}", t) for sid, t in self.distractors
        ]
        for name, track in tracks:
            if track.shape != (self.n_frames, 4):
                raise DataError(
                    f"scene {self.scene_id}: {name} track shape {track.shape}, "
                    f"want ({self.n_frames}, 4)"
                )
            cx, cy, w, h = track.T
            if (
                np.any(cx - w / 2 < -1e-9)
                or np.any(cy - h / 2 < -1e-9)
                or np.any(cx + w / 2 > 1 + 1e-9)
                or np.any(cy + h / 2 > 1 + 1e-9)
            ):
                raise DataError(f"scene {self.scene_id}: {name} track leaves [0,1]^2")


@dataclass
class MaskAnnotation:
    """Per-frame binary target masks over the patch grid, plus the caption."""

    masks: np.ndarray  # [n_frames, H, W] bool
    caption: str


@dataclass
class VideoSample:
    """One rendered scene: features, query, and the ground-truth tube."""

    sample_id: str
    frames: np.ndarray  # [n_frames, H, W, feature_dim] float32
    query: str
    gt: Tube
    duration: float
    fps: float = 2.0
    sigma: float = 0.05
    target_signature: int = 0
    distractor_signatures: Tuple[int, ...] = ()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def validate_sample(sample: VideoSample) -> None:
    """Check every structural VideoSample invariant; raises DataError."""
    sid = sample.sample_id
    if sample.frames.ndim != 4:
        raise DataError(f"sample {sid}: frames must be 4-d, got {sample.frames.shape}")
    n_expected = int(math.floor(sample.duration * sample.fps + 1e-9))
    if sample.n_frames != n_expected:
        raise DataError(
            f"sample {sid}: {sample.n_frames} frames but duration*fps gives {n_expected}"
        )
    if not np.all(np.isfinite(sample.frames)):
        raise DataError(f"sample {sid}: non-finite feature values")
    if not sample.query:
        raise DataError(f"sample {sid}: empty query")
    win = sample.gt.window
    if win.end > sample.duration + 1e-9:
        raise DataError(f"sample {sid}: gt window exceeds duration")
    sample.gt.validate(sample.fps, sample.n_frames)
    for f, box in sample.gt.boxes.items():
        x1, y1, x2, y2 = box.as_corner()
        if x1 < -1e-9 or y1 < -1e-9 or x2 > 1 + 1e-9 or y2 > 1 + 1e-9:
            raise DataError(f"sample {sid}: frame {f} gt box leaves [0,1]^2")
        if x2 <= x1 or y2 <= y1:
            raise DataError(f"sample {sid}: frame {f} gt box is degenerate")


def annotation_from_spec(spec: SceneSpec) -> MaskAnnotation:
    """Target cell masks per frame (empty outside the event window)."""
    spec.validate()
    h, w = spec.grid
    masks = np.zeros((spec.n_frames, h, w), dtype=bool)
    for f in window_frames(spec.event_window, spec.fps, spec.n_frames):
        cells = covered_cells(BoundingBox(tuple(spec.target_track[f]), "center"), spec.grid)
        if cells is None:
            raise DataError(f"scene {spec.scene_id}: frame {f} target covers no cell")
        r0, r1, c0, c1 = cells
        masks[f, r0 : r1 + 1, c0 : c1 + 1] = True
    return MaskAnnotation(masks=masks, caption=f"find sig_{spec.target_signature}")


def masks_to_boxes(annotation: MaskAnnotation, grid: Tuple[int, int] | None = None) -> Dict[int, BoundingBox]:
    """Tightest normalized box around positive cells, per frame.

    Frames with an all-false mask are omitted from the result.
    """
    n_frames, h, w = annotation.masks.shape
    if grid is not None and grid != (h, w):
        raise DataError(f"mask grid {(h, w)} does not match expected {grid}")
    boxes: Dict[int, BoundingBox] = {}
    for f in range(n_frames):
        mask = annotation.masks[f]
        if not mask.any():
            continue
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        boxes[f] = cell_extent_box(rows[0], rows[-1], cols[0], cols[-1], (h, w))
    return boxes


def generate_scene(spec: SceneSpec) -> VideoSample:
    """Render a SceneSpec to features and a gt tube. Bit-identical per seed."""
    spec.validate()
    annotation = annotation_from_spec(spec)
    boxes = masks_to_boxes(annotation)
    event_frames = list(window_frames(spec.event_window, spec.fps, spec.n_frames))
    if sorted(boxes) != event_frames:
        raise DataError(f"scene {spec.scene_id}: mask frames do not match event window")

    h, w = spec.grid
    canvas = np.tile(
        signature_vector(BACKGROUND_ID, spec.feature_dim), (spec.n_frames, h, w, 1)
    )
    for sig_id, track in spec.distractors:
        vec = signature_vector(sig_id, spec.feature_dim)
        for f in range(spec.n_frames):
            cells = covered_cells(BoundingBox(tuple(track[f]), "center"), spec.grid)
            if cells is not None:
                r0, r1, c0, c1 = cells
                canvas[f, r0 : r1 + 1, c0 : c1 + 1] = vec
    target_vec = signature_vector(spec.target_signature, spec.feature_dim)
    for f in event_frames:
        mask = annotation.masks[f]
        canvas[f, mask] = target_vec

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.n_frames]))
    canvas = canvas + rng.normal(0.0, spec.sigma, size=canvas.shape)

    sample = VideoSample(
        sample_id=spec.scene_id,
        frames=canvas.astype(np.float32),
        query=annotation.caption,
        gt=Tube(spec.event_window, boxes),
        duration=spec.duration,
        fps=spec.fps,
        sigma=spec.sigma,
        target_signature=spec.target_signature,
        distractor_signatures=tuple(sid for sid, _ in spec.distractors),
    )
    validate_sample(sample)
    return sample


def insert_irrelevant_clips(
    sample: VideoSample, pre_seconds: float, post_seconds: float
) -> VideoSample:
    """Pad a sample with target-free clips, shifting the gt window right.

    Clip lengths are quantized to whole frames so duration*fps stays exact.
    Inserted frames carry only the background signature plus noise.
    """
    if pre_seconds < 0 or post_seconds < 0:
        raise DataError(f"sample {sample.sample_id}: negative clip length")
    pre_frames = int(math.floor(pre_seconds * sample.fps + 1e-9))
    post_frames = int(math.floor(post_seconds * sample.fps + 1e-9))
    if pre_frames == 0 and post_frames == 0:
        return sample

    h, w = sample.grid
    dim = sample.frames.shape[3]
    rng = np.random.default_rng(
        np.random.SeedSequence([abs(hash(sample.sample_id)) % (2**31), pre_frames, post_frames])
    )
    background = signature_vector(BACKGROUND_ID, dim)

    def pad(n: int) -> np.ndarray:
        base = np.tile(background, (n, h, w, 1))
        return (base + rng.normal(0.0, sample.sigma, size=base.shape)).astype(np.float32)

    frames = np.concatenate([pad(pre_frames), sample.frames, pad(post_frames)], axis=0)
    shift_seconds = pre_frames / sample.fps
    window = TemporalWindow(
        sample.gt.window.start + shift_seconds, sample.gt.window.end + shift_seconds
    )
    boxes = {f + pre_frames: box for f, box in sample.gt.boxes.items()}
    out = VideoSample(
        sample_id=sample.sample_id,
        frames=frames,
        query=sample.query,
        gt=Tube(window, boxes),
        duration=sample.duration + (pre_frames + post_frames) / sample.fps,
        fps=sample.fps,
        sigma=sample.sigma,
        target_signature=sample.target_signature,
        distractor_signatures=sample.distractor_signatures,
    )
    validate_sample(out)
    return out


def quality_filter(
    samples: Iterable[VideoSample],
    max_duration: float = 180.0,
    min_span: float = 1.0,
) -> Tuple[List[VideoSample], List[Tuple[VideoSample, str]]]:
    """Drop overlong videos and blink-length events, with named reasons."""
    kept: List[VideoSample] = []
    dropped: List[Tuple[VideoSample, str]] = []
    for s in samples:
        if s.duration > max_duration:
            dropped.append((s, f"duration>{max_duration:g}s"))
        elif s.gt.window.duration < min_span:
            dropped.append((s, f"span<{min_span:g}s"))
        else:
            kept.append(s)
    return kept, dropped


def _quantized_track(
    rng: np.random.Generator, n_frames: int, grid: Tuple[int, int], size_cells: Tuple[int, int]
) -> np.ndarray:
    """Cell-aligned box track drifting by single-cell steps, clamped to the grid."""
    h, w = grid
    ch, cw = size_cells
    r = int(rng.integers(0, h - ch + 1))
    c = int(rng.integers(0, w - cw + 1))
    track = np.empty((n_frames, 4), dtype=np.float64)
    for f in range(n_frames):
        if f > 0 and rng.random() < 0.35:
            r = min(max(r + int(rng.integers(-1, 2)), 0), h - ch)
            c = min(max(c + int(rng.integers(-1, 2)), 0), w - cw)
        track[f] = ((c + cw / 2) / w, (r + ch / 2) / h, cw / w, ch / h)
    return track


def random_scene_spec(
    seed: int,
    scene_id: str | None = None,
    duration_range: Tuple[float, float] = (5.0, 9.0),
    sigma: float = 0.05,
    n_signatures: int = 8,
    grid: Tuple[int, int] = (8, 8),
    feature_dim: int = 32,
    fps: float = 2.0,
) -> SceneSpec:
    """Random scene with a frame-aligned event window and >=1 live distractor.

    Event windows snap to whole frames so the one-decimal timestamp grammar
    renders them exactly. Retries (deterministically) until some distractor
    stays visible on at least half the frames after the target is painted
    over it.
    """
    for attempt in range(8):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        duration = float(
            rng.integers(
                round(duration_range[0] * fps), round(duration_range[1] * fps) + 1
            )
            / fps
        )
        n_frames = int(math.floor(duration * fps + 1e-9))
        # Event span of 3+ whole frames, up to ~60% of the video. The window
        # end is the *start time of the last covered frame* so the inclusive
        # floor(end*fps) convention never names a frame past the video end,
        # even after irrelevant clips are appended.
        span_frames = int(rng.integers(3, max(4, int(n_frames * 0.6) + 1)))
        start_frame = int(rng.integers(0, n_frames - span_frames + 1))
        window = TemporalWindow(
            start_frame / fps, (start_frame + span_frames - 1) / fps
        )

        sig_ids = rng.choice(n_signatures, size=min(3, n_signatures), replace=False)
        target_sig = int(sig_ids[0])
        size = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        spec = SceneSpec(
            scene_id=scene_id or f"scene-{seed:08d}",
            duration=duration,
            event_window=window,
            target_signature=target_sig,
            target_track=_quantized_track(rng, n_frames, grid, size),
            distractors=[
                (int(sid), _quantized_track(rng, n_frames, grid, (2, 2)))
                for sid in sig_ids[1:]
            ],
            fps=fps,
            grid=grid,
            feature_dim=feature_dim,
            sigma=sigma,
            seed=int(rng.integers(0, 2**31)),
        )
        if _distractor_visible_fraction(spec) >= 0.5:
            return spec
    raise DataError(f"seed {seed}: could not place a visible distractor")


def _distractor_visible_fraction(spec: SceneSpec) -> float:
    """Largest per-distractor fraction of frames with unoccluded cells."""
    if not spec.distractors:
        return 0.0
    annotation = annotation_from_spec(spec)
    best = 0.0
    for _, track in spec.distractors:
        visible = 0
        for f in range(spec.n_frames):
            cells = covered_cells(BoundingBox(tuple(track[f]), "center"), spec.grid)
            if cells is None:
                continue
            r0, r1, c0, c1 = cells
            occupied = np.zeros(spec.grid, dtype=bool)
            occupied[r0 : r1 + 1, c0 : c1 + 1] = True
            if (occupied & ~annotation.masks[f]).any():
                visible += 1
        best = max(best, visible / spec.n_frames)
    return best


def _sample_record(sample: VideoSample, offset: int, nbytes: int) -> dict:
    h, w = sample.grid
    return {
        "format_version": FORMAT_VERSION,
        "id": sample.sample_id,
        "duration": sample.duration,
        "fps": sample.fps,
        "sigma": sample.sigma,
        "target_signature": sample.target_signature,
        "distractor_signatures": list(sample.distractor_signatures),
        "grid": [h, w],
        "feature_dim": sample.frames.shape[3],
        "n_frames": sample.n_frames,
        "query": sample.query,
        "window": [sample.gt.window.start, sample.gt.window.end],
        "boxes": {str(f): list(b.as_corner()) for f, b in sorted(sample.gt.boxes.items())},
        "blob_offset": offset,
        "blob_nbytes": nbytes,
    }


def write_dataset(path: str, samples: Sequence[VideoSample]) -> None:
    """Write a dataset directory: index.jsonl plus a float32 feature blob."""
    os.makedirs(path, exist_ok=True)
    index_path = os.path.join(path, "index.jsonl")
    blob_path = os.path.join(path, "features.bin")
    offset = 0
    with open(index_path, "w", encoding="utf-8") as index, open(blob_path, "wb") as blob:
        for sample in samples:
            validate_sample(sample)
            raw = np.ascontiguousarray(sample.frames, dtype="<f4").tobytes()
            blob.write(raw)
            index.write(json.dumps(_sample_record(sample, offset, len(raw))) + "\n")
            offset += len(raw)


def read_dataset(path: str) -> List[VideoSample]:
    """Load and validate a dataset directory written by write_dataset."""
    index_path = os.path.join(path, "index.jsonl")
    blob_path = os.path.join(path, "features.bin")
    if not os.path.exists(index_path):
        raise DataError(f"dataset index not found: {index_path}")
    blob = b""
    if os.path.exists(blob_path):
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    samples: List[VideoSample] = []
    with open(index_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"index line {line_no}: invalid JSON: {exc}") from exc
            samples.append(_record_to_sample(record, blob))
    return samples


def _record_to_sample(record: dict, blob: bytes) -> VideoSample:
    sid = record.get("id", "?")
    try:
        version = record["format_version"]
        if version != FORMAT_VERSION:
            raise DataError(f"sample {sid}: format_version {version}, expected {FORMAT_VERSION}")
        h, w = record["grid"]
        n_frames = record["n_frames"]
        dim = record["feature_dim"]
        offset, nbytes = record["blob_offset"], record["blob_nbytes"]
        expected = n_frames * h * w * dim * 4
        if nbytes != expected:
            raise DataError(
                f"sample {sid}: blob_nbytes {nbytes} does not match shape "
                f"[{n_frames},{h},{w},{dim}]"
            )
        if offset < 0 or offset + nbytes > len(blob):
            raise DataError(f"sample {sid}: feature blob truncated or offsets corrupt")
        frames = (
            np.frombuffer(blob, dtype="<f4", count=n_frames * h * w * dim, offset=offset)
            .reshape(n_frames, h, w, dim)
            .copy()
        )
        window = TemporalWindow(float(record["window"][0]), float(record["window"][1]))
        boxes = {
            int(f): BoundingBox.from_corner(*coords)
            for f, coords in record["boxes"].items()
        }
        sample = VideoSample(
            sample_id=sid,
            frames=frames,
            query=record["query"],
            gt=Tube(window, boxes),
            duration=float(record["duration"]),
            fps=float(record["fps"]),
            sigma=float(record["sigma"]),
            target_signature=int(record["target_signature"]),
            distractor_signatures=tuple(record["distractor_signatures"]),
        )
    except KeyError as exc:
        raise DataError(f"sample {sid}: index record missing field {exc}") from exc
    validate_sample(sample)
    return sample
