"""Training objectives for the grounding model.

Five ingredients: autoregressive token cross-entropy on the temporal answer,
Hungarian-matched detection losses (objectness, L1, generalized IoU),
a contrastive denoising term fed by jittered ground-truth boxes, an InfoNCE
alignment term pulling selected image tokens toward the bridge vector, and
the weighted composites that tie them together. Boxes cross these functions
in center form (cx, cy, w, h); corner form appears only inside the IoU math.

All losses are deterministic given explicit generators and differentiable
end to end; the temperature enters as exp(log_tau) so it stays positive
without clamping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import DataError, NumericError
from .spatial_decoder import CandidateSet, EncoderFeatures, SpatialPredictions, safe_cosine
from .transformer import DTYPE

TAU_INIT = 0.07


@dataclass
class LossWeights:
    """Static loss weights; the temperature itself lives on the model."""

    token: float = 1.0  # weight on the token loss in the composite
    spatial: float = 0.02  # weight on the spatial loss in the composite
    obj: float = 1.0
    box: float = 0.5
    giou: float = 2.0
    dn: float = 1.0
    align: float = 1.0
    dn_cls: float = 1.0
    dn_box: float = 5.0
    dn_giou: float = 2.0
    # Matching costs mirror the dn triple; no separate weights are defined.
    cost_cls: float = 1.0
    cost_box: float = 5.0
    cost_giou: float = 2.0
    negatives: int = 16  # alignment negatives per positive
    tau_init: float = TAU_INIT

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise DataError(f"loss weight {f.name} must be >= 0")
        if self.tau_init <= 0:
            raise DataError("tau_init must be positive")


def token_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the masked (answer) positions."""
    if logits.shape[0] != targets.shape[0] or mask.shape != targets.shape:
        raise DataError("token loss inputs disagree on sequence length")
    if int(mask.sum()) == 0:
        raise DataError("token loss mask selects no positions")
    return F.cross_entropy(logits[mask], targets[mask])


def center_to_corner(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def corner_to_center(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def giou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU between corner-form boxes, broadcasting elementwise."""
    ax1, ay1, ax2, ay2 = a.unbind(-1)
    bx1, by1, bx2, by2 = b.unbind(-1)
    iw = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    iou = inter / union.clamp(min=1e-12)
    enclose = (torch.maximum(ax2, bx2) - torch.minimum(ax1, bx1)) * (
        torch.maximum(ay2, by2) - torch.minimum(ay1, by1)
    )
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


@dataclass
class MatchResult:
    """Injective assignment of prediction rows to ground-truth rows."""

    pred_index: List[int]
    gt_index: List[int]
    unmatched: List[int]
    cost: float

    def __post_init__(self) -> None:
        if len(self.pred_index) != len(self.gt_index):
            raise DataError("match index lists disagree in length")
        if len(set(self.pred_index)) != len(self.pred_index):
            raise DataError("a prediction was matched twice")
        if len(set(self.gt_index)) != len(self.gt_index):
            raise DataError("a ground truth was matched twice")


def assign_min_cost(cost: np.ndarray) -> MatchResult:
    """Minimal-cost injective assignment over a [preds, gts] cost matrix."""
    if cost.ndim != 2 or cost.shape[0] < 1:
        raise DataError(f"cost matrix must be 2-D with >= 1 row, got {cost.shape}")
    if cost.shape[1] == 0:
        return MatchResult([], [], list(range(cost.shape[0])), 0.0)
    if not np.all(np.isfinite(cost)):
        raise NumericError("matching cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    matched = set(rows.tolist())
    return MatchResult(
        pred_index=rows.tolist(),
        gt_index=cols.tolist(),
        unmatched=[i for i in range(cost.shape[0]) if i not in matched],
        cost=float(cost[rows, cols].sum()),
    )


def hungarian_match(
    objectness: torch.Tensor,
    boxes_center: torch.Tensor,
    gt_center: torch.Tensor,
    weights: LossWeights,
) -> MatchResult:
    """Match predictions to ground truths by objectness + L1 + GIoU cost."""
    q = boxes_center.shape[0]
    g = gt_center.shape[0]
    if q < 1:
        raise DataError("matching needs at least one prediction")
    if g == 0:
        return MatchResult([], [], list(range(q)), 0.0)
    with torch.no_grad():
        l1 = (boxes_center[:, None, :] - gt_center[None, :, :]).abs().mean(dim=-1)
        giou = giou_pairs(
            center_to_corner(boxes_center)[:, None, :],
            center_to_corner(gt_center)[None, :, :],
        )
        cost = (
            weights.cost_cls * (1.0 - objectness)[:, None]
            + weights.cost_box * l1
            + weights.cost_giou * (1.0 - giou)
        )
    return assign_min_cost(cost.numpy())


@dataclass
class DetectionLosses:
    obj: torch.Tensor
    box: torch.Tensor
    giou: torch.Tensor
    match: MatchResult


def detection_losses(
    preds: SpatialPredictions, gt_center: torch.Tensor, match: MatchResult
) -> DetectionLosses:
    """Objectness BCE over every query plus L1/GIoU over the matched pairs.

    The assignment is an input, not recomputed here: gradients treat it as
    constant, and callers (gradient checks in particular) can hold it fixed.
    Frames without ground truth still pay the objectness loss (all targets 0)
    while the pairwise terms are exactly zero.
    """
    q = preds.objectness.shape[0]
    if any(i >= q for i in match.pred_index) or any(
        j >= gt_center.shape[0] for j in match.gt_index
    ):
        raise DataError("match indices fall outside predictions or ground truths")
    targets = torch.zeros_like(preds.objectness)
    if match.pred_index:
        targets[torch.as_tensor(match.pred_index, dtype=torch.long)] = 1.0
    l_obj = F.binary_cross_entropy(preds.objectness, targets)
    if match.pred_index:
        rows = torch.as_tensor(match.pred_index, dtype=torch.long)
        cols = torch.as_tensor(match.gt_index, dtype=torch.long)
        pred_boxes = preds.boxes[rows]
        gt_boxes = gt_center[cols]
        l_box = (pred_boxes - gt_boxes).abs().mean()
        l_giou = (1.0 - giou_pairs(center_to_corner(pred_boxes), center_to_corner(gt_boxes))).mean()
    else:
        l_box = torch.zeros((), dtype=DTYPE)
        l_giou = torch.zeros((), dtype=DTYPE)
    return DetectionLosses(obj=l_obj, box=l_box, giou=l_giou, match=match)


def alignment_loss(
    candidates: CandidateSet,
    feats: EncoderFeatures,
    q_bridge: torch.Tensor,
    tau: torch.Tensor | float,
    generator: torch.Generator,
    n_negatives: int = 16,
    share_negatives: bool = False,
) -> torch.Tensor:
    """InfoNCE over selected tokens against unselected same-layer negatives.

    Each selected candidate is a positive whose cosine to the mean bridge
    vector competes against ``n_negatives`` uniformly sampled unselected
    tokens from its own encoder layer. Negatives are resampled per positive
    unless ``share_negatives`` reuses one draw per layer. Layers with fewer
    unselected tokens than requested contribute what they have; with no
    negatives at all the per-positive loss is exactly zero.
    """
    if len(candidates) == 0:
        raise DataError("alignment needs at least one selected candidate")
    if n_negatives < 0:
        raise DataError("n_negatives must be >= 0")
    if q_bridge.shape[0] == 0:
        anchor = torch.zeros(feats.layers[0].shape[1], dtype=DTYPE)
    else:
        anchor = q_bridge.mean(dim=0)

    unselected: dict[int, torch.Tensor] = {}
    for l in range(feats.n_layers):
        chosen = set(candidates.token_index[candidates.layer_index == l].tolist())
        rest = [i for i in range(feats.n_tokens) if i not in chosen]
        unselected[l] = torch.as_tensor(rest, dtype=torch.long)

    def draw(l: int) -> torch.Tensor:
        pool = unselected[l]
        n = min(n_negatives, pool.shape[0])
        pick = torch.randperm(pool.shape[0], generator=generator)[:n]
        return pool[pick]

    shared = {l: draw(l) for l in unselected} if share_negatives else None
    terms = []
    for j in range(len(candidates)):
        l = int(candidates.layer_index[j])
        neg_idx = shared[l] if share_negatives else draw(l)
        pos = safe_cosine(candidates.features[j : j + 1], anchor)
        neg = safe_cosine(feats.layers[l][neg_idx], anchor)
        logits = torch.cat([pos, neg]) / tau
        terms.append(torch.logsumexp(logits, dim=0) - logits[0])
    return torch.stack(terms).mean()


@dataclass
class DenoisingBatch:
    """Jittered ground-truth boxes plus labels, group-major (positive first)."""

    queries: torch.Tensor  # [2 * n_groups, 4] center form
    positive: torch.Tensor  # [2 * n_groups] bool
    gt_box: torch.Tensor  # [4] center form
    n_groups: int


def _jittered(box: torch.Tensor, lo: float, hi: float, generator: torch.Generator) -> torch.Tensor:
    mags = lo + (hi - lo) * torch.rand(4, dtype=DTYPE, generator=generator)
    signs = (torch.randint(0, 2, (4,), generator=generator) * 2 - 1).to(DTYPE)
    cx, cy, w, h = box.unbind(-1)
    return torch.stack(
        [
            cx + signs[0] * mags[0] * w,
            cy + signs[1] * mags[1] * h,
            w * (1 + signs[2] * mags[2]),
            h * (1 + signs[3] * mags[3]),
        ]
    )


def build_denoising_queries(
    gt_box: torch.Tensor,
    generator: torch.Generator,
    noise_scale: float = 0.4,
    n_groups: int = 3,
) -> DenoisingBatch:
    """Per group: one positive jitter below noise_scale/2, one negative above.

    Jitter is relative (centers move by fractions of the box size, sizes
    scale multiplicatively) and deliberately unclamped so the magnitudes can
    be reconstructed exactly from the output.
    """
    if gt_box.shape != (4,):
        raise DataError(f"gt box must be a single center-form box, got {tuple(gt_box.shape)}")
    if noise_scale < 0 or n_groups < 0:
        raise DataError("noise_scale and n_groups must be >= 0")
    rows = []
    labels = []
    box = gt_box.to(DTYPE)
    for _ in range(n_groups):
        rows.append(_jittered(box, 0.0, noise_scale / 2.0, generator))
        labels.append(True)
        rows.append(_jittered(box, noise_scale / 2.0, noise_scale, generator))
        labels.append(False)
    queries = torch.stack(rows) if rows else torch.zeros(0, 4, dtype=DTYPE)
    return DenoisingBatch(
        queries=queries,
        positive=torch.as_tensor(labels, dtype=torch.bool),
        gt_box=box,
        n_groups=n_groups,
    )


def dn_attention_mask(n_match: int, n_groups: int, group_size: int = 2) -> torch.Tensor:
    """Bool mask (True = may not attend) isolating dn groups from everything.

    Matching queries see only each other; every dn group sees only itself.
    """
    total = n_match + n_groups * group_size
    mask = torch.ones(total, total, dtype=torch.bool)
    mask[:n_match, :n_match] = False
    for g in range(n_groups):
        start = n_match + g * group_size
        mask[start : start + group_size, start : start + group_size] = False
    return mask


def denoising_loss(
    preds: SpatialPredictions, batch: DenoisingBatch, weights: LossWeights
) -> torch.Tensor:
    """Reconstruction on positive dn queries, background on negatives."""
    if preds.objectness.shape[0] != batch.positive.shape[0]:
        raise DataError("dn predictions do not match the dn batch size")
    if batch.positive.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    targets = batch.positive.to(preds.objectness.dtype)
    l_cls = F.binary_cross_entropy(preds.objectness, targets)
    pos = batch.positive
    if bool(pos.any()):
        pred_boxes = preds.boxes[pos]
        gt = batch.gt_box.unsqueeze(0).expand_as(pred_boxes)
        l_box = (pred_boxes - gt).abs().mean()
        l_giou = (1.0 - giou_pairs(center_to_corner(pred_boxes), center_to_corner(gt))).mean()
    else:
        l_box = torch.zeros((), dtype=DTYPE)
        l_giou = torch.zeros((), dtype=DTYPE)
    return weights.dn_cls * l_cls + weights.dn_box * l_box + weights.dn_giou * l_giou


@dataclass
class SpatialTerms:
    """Per-frame loss components entering the spatial composite."""

    obj: torch.Tensor | float
    box: torch.Tensor | float
    giou: torch.Tensor | float
    dn: torch.Tensor | float
    align: torch.Tensor | float


def spatial_loss(terms: Sequence[SpatialTerms], weights: LossWeights) -> torch.Tensor:
    """Weighted per-frame composite, averaged over the sampled frames."""
    if not terms:
        raise DataError("spatial loss needs at least one frame")

    def scalar(x: torch.Tensor | float) -> torch.Tensor:
        return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=DTYPE)

    per_frame = [
        weights.obj * scalar(t.obj)
        + weights.box * scalar(t.box)
        + weights.giou * scalar(t.giou)
        + weights.dn * scalar(t.dn)
        + weights.align * scalar(t.align)
        for t in terms
    ]
    return torch.stack(per_frame).mean()


def total_loss(
    l_token: torch.Tensor | float, l_spatial: torch.Tensor | float, weights: LossWeights
) -> torch.Tensor:
    composite = weights.token * l_token + weights.spatial * l_spatial
    return composite if isinstance(composite, torch.Tensor) else torch.tensor(composite, dtype=DTYPE)


def log_tau_parameter(weights: LossWeights) -> torch.nn.Parameter:
    """Learnable log-temperature, exponentiated at use sites."""
    return torch.nn.Parameter(torch.tensor(math.log(weights.tau_init), dtype=DTYPE))
