"""Tube-grounding evaluation: m_tIoU, m_vIoU, vIoU@R, R@1, AO/SR, bin reports.

All metrics are computed on (predicted tube, ground-truth tube) pairs sharing
one frame clock. Internally everything is a fraction in [0, 1]; the text
renderer shows percentages with one decimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from .errors import DataError
from .geometry import BoundingBox, TemporalWindow, Tube, box_iou, temporal_iou

DEFAULT_BIN_EDGES = (0.0, 0.3, 0.5, 0.7, 1.0)


@dataclass
class EvalSample:
    """One evaluated video: predicted tube vs ground truth on a shared clock."""

    sample_id: str
    pred: Tube
    gt: Tube
    fps: float = 2.0

    def validate(self) -> None:
        if self.fps <= 0:
            raise DataError(f"sample {self.sample_id}: fps must be positive")
        self.pred.validate(self.fps)
        self.gt.validate(self.fps)


def sample_tiou(sample: EvalSample) -> float:
    return temporal_iou(sample.pred.window, sample.gt.window)


def sample_viou(sample: EvalSample) -> float:
    """Per-frame IoU summed over the union frame set, divided by its size.

    Frames covered by only one tube contribute 0 but still enlarge the union.
    """
    union = set(sample.pred.boxes) | set(sample.gt.boxes)
    if not union:
        return 0.0
    total = 0.0
    for f in union:
        if f in sample.pred.boxes and f in sample.gt.boxes:
            total += box_iou(sample.pred.boxes[f], sample.gt.boxes[f])
    return total / len(union)


def _require(samples: Sequence[EvalSample]) -> None:
    if not samples:
        raise DataError("metric over an empty sample list")


def mean_tiou(samples: Sequence[EvalSample]) -> float:
    _require(samples)
    return sum(sample_tiou(s) for s in samples) / len(samples)


def mean_viou(samples: Sequence[EvalSample]) -> float:
    _require(samples)
    return sum(sample_viou(s) for s in samples) / len(samples)


def viou_at(samples: Sequence[EvalSample], thresholds: Sequence[float]) -> Dict[float, float]:
    """Fraction of samples with vIoU >= R for each threshold R (inclusive)."""
    _require(samples)
    vals = [sample_viou(s) for s in samples]
    return {r: sum(1 for v in vals if v >= r) / len(vals) for r in thresholds}


def recall_at_iou(
    windows: Sequence[Tuple[TemporalWindow, TemporalWindow]], tau: float
) -> float:
    """R@1 at tIoU threshold tau over (pred, gt) window pairs (inclusive)."""
    if not windows:
        raise DataError("recall over an empty window list")
    hits = sum(1 for pred, gt in windows if temporal_iou(pred, gt) >= tau)
    return hits / len(windows)


def average_overlap_and_success(
    frame_ious: Sequence[float], thresholds: Sequence[float] = (0.5, 0.75)
) -> Tuple[float, Dict[float, float]]:
    """Mean per-frame IoU (AO) and the fraction of frames strictly above each threshold."""
    if not frame_ious:
        raise DataError("AO/SR over an empty frame-IoU list")
    ao = sum(frame_ious) / len(frame_ious)
    sr = {t: sum(1 for v in frame_ious if v > t) / len(frame_ious) for t in thresholds}
    return ao, sr


@dataclass
class BinRow:
    """Aggregates for one temporal-IoU bin."""

    lo: float
    hi: float
    count: int
    mean_tiou: float | None
    mean_viou: float | None


def tiou_bin_report(
    samples: Sequence[EvalSample], edges: Sequence[float] = DEFAULT_BIN_EDGES
) -> List[BinRow]:
    """Bucket samples by predicted tIoU and aggregate per bucket.

    Bins are [lo, hi) except the last, which includes its upper edge so a
    perfect prediction lands in the top bin. Empty bins report count 0 and no
    means.
    """
    _require(samples)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise DataError(f"bin edges must be strictly increasing, got {edges}")
    rows: List[BinRow] = []
    for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
        last = i == len(edges) - 2
        members = [
            s
            for s in samples
            if lo <= sample_tiou(s) < hi or (last and sample_tiou(s) == hi)
        ]
        if members:
            rows.append(
                BinRow(lo, hi, len(members), mean_tiou(members), mean_viou(members))
            )
        else:
            rows.append(BinRow(lo, hi, 0, None, None))
    return rows


@dataclass
class MetricReport:
    """Everything one evaluation run reports, fractions in [0, 1]."""

    n_samples: int
    m_tiou: float | None
    m_viou: float
    viou_at: Dict[float, float] = field(default_factory=dict)
    recall_at: Dict[float, float] = field(default_factory=dict)
    ao: float | None = None
    sr: Dict[float, float] | None = None

    def validate(self) -> None:
        thresholds = sorted(self.viou_at)
        values = [self.viou_at[t] for t in thresholds]
        if any(b > a + 1e-12 for a, b in zip(values, values[1:])):
            raise DataError("vIoU@R must be non-increasing in R")


def build_report(
    samples: Sequence[EvalSample],
    viou_thresholds: Sequence[float] = (0.3, 0.5),
    recall_taus: Sequence[float] = (0.3, 0.5),
    frame_ious: Sequence[float] | None = None,
    include_tiou: bool = True,
) -> MetricReport:
    """Assemble a MetricReport; oracle-window runs pass include_tiou=False."""
    _require(samples)
    ao = sr = None
    if frame_ious:
        ao, sr = average_overlap_and_success(frame_ious)
    report = MetricReport(
        n_samples=len(samples),
        m_tiou=mean_tiou(samples) if include_tiou else None,
        m_viou=mean_viou(samples),
        viou_at=viou_at(samples, viou_thresholds),
        recall_at=(
            {tau: recall_at_iou([(s.pred.window, s.gt.window) for s in samples], tau) for tau in recall_taus}
            if include_tiou
            else {}
        ),
        ao=ao,
        sr=sr,
    )
    report.validate()
    return report


def _pct(value: float | None) -> str:
    return "---" if value is None else f"{100.0 * value:.1f}"


def format_report_table(report: MetricReport, bins: Sequence[BinRow] | None = None) -> str:
    """Render a report (and optional bin rows) as an aligned plain-text table."""
    rows: List[Tuple[str, str]] = [("samples", str(report.n_samples))]
    rows.append(("m_tIoU", _pct(report.m_tiou)))
    rows.append(("m_vIoU", _pct(report.m_viou)))
    for r in sorted(report.viou_at):
        rows.append((f"vIoU@{r:g}", _pct(report.viou_at[r])))
    for tau in sorted(report.recall_at):
        rows.append((f"R@1 tIoU>={tau:g}", _pct(report.recall_at[tau])))
    if report.ao is not None:
        rows.append(("AO", _pct(report.ao)))
    for t in sorted(report.sr or {}):
        rows.append((f"SR@{t:g}", _pct(report.sr[t])))
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value:>7}" for name, value in rows]
    if bins is not None:
        lines.append("")
        lines.append("tIoU bin     count   m_tIoU   m_vIoU")
        for row in bins:
            lines.append(
                f"[{row.lo:.1f},{row.hi:.1f}]  {row.count:>6}  {_pct(row.mean_tiou):>7}  {_pct(row.mean_viou):>7}"
            )
    return "\n".join(lines)


def report_to_dict(report: MetricReport, bins: Sequence[BinRow] | None = None) -> dict:
    out = {
        "n_samples": report.n_samples,
        "m_tiou": report.m_tiou,
        "m_viou": report.m_viou,
        "viou_at": {str(k): v for k, v in report.viou_at.items()},
        "recall_at": {str(k): v for k, v in report.recall_at.items()},
        "ao": report.ao,
        "sr": {str(k): v for k, v in (report.sr or {}).items()} or None,
    }
    if bins is not None:
        out["tiou_bins"] = [
            {
                "lo": b.lo,
                "hi": b.hi,
                "count": b.count,
                "mean_tiou": b.mean_tiou,
                "mean_viou": b.mean_viou,
            }
            for b in bins
        ]
    return out


def tube_to_record(sample_id: str, tube: Tube) -> dict:
    """One interchange record: {id, window, boxes keyed by frame index}."""
    return {
        "id": sample_id,
        "window": [tube.window.start, tube.window.end],
        "boxes": {str(f): list(box.as_corner()) for f, box in sorted(tube.boxes.items())},
    }


def record_to_tube(record: dict) -> Tuple[str, Tube]:
    try:
        sample_id = record["id"]
        start, end = record["window"]
        boxes = {
            int(f): BoundingBox.from_corner(*coords)
            for f, coords in record["boxes"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed tube record {record.get('id', '?')!r}: {exc}") from exc
    return sample_id, Tube(TemporalWindow(float(start), float(end)), boxes)


def write_tube_records(path, items: Iterable[Tuple[str, Tube]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, tube in items:
            fh.write(json.dumps(tube_to_record(sample_id, tube)) + "\n")


def read_tube_records(path) -> List[Tuple[str, Tube]]:
    out: List[Tuple[str, Tube]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_tube(json.loads(line)))
    return out
