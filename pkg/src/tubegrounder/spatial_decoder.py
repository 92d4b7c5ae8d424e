"""Query-conditioned spatial localization on one frame's patch grid.

A small self-attention encoder refines the frame's patch features; candidate
tokens are picked from *every* encoder layer by cosine relevance to the mean
bridge vector (coarse layers catch large objects, late layers catch detail),
and a two-layer decoder with dense cross-attention turns the candidates into
center-form boxes with objectness scores. Denoising queries, when supplied,
ride along behind the candidates under an attention mask that keeps them
invisible to the matching queries and to other denoising groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .geometry import BoundingBox
from .transformer import DTYPE, ModelConfig, pos_embed

RELEVANCE_MODES = ("mean", "max")

# Positional embeddings enter the image encoder damped. At full strength
# their amplitude swamps the lifted content features, and cosine relevance
# against the bridge vector degenerates into a fixed grid-location pattern
# instead of a comparison of what each cell actually contains.
POS_SCALE = 0.1


class PairedFrameLift(nn.Module):
    """Single-frame lift through a frame-pair projection, weights shared.

    A frame is embedded as a static pair (itself twice), so the spatial
    encoder reads image content through the same projection the sequence
    model uses for its visual tokens and the two token spaces stay mutually
    legible. Everything the sequence model learns about matching query words
    to planted visual content transfers to candidate selection for free.
    """

    def __init__(self, pair_proj: nn.Linear):
        super().__init__()
        self.pair_proj = pair_proj

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pair_proj(torch.cat([x, x], dim=-1))


def safe_cosine(tokens: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    """Cosine of each token row against a single vector; zero-norm rows give 0."""
    dots = tokens @ anchor
    denom = (tokens.norm(dim=-1) * anchor.norm()).clamp(min=1e-12)
    return dots / denom


@dataclass
class EncoderFeatures:
    """Per-layer token features E^1..E^n for one frame, each [H*W, D]."""

    layers: List[torch.Tensor]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DataError("EncoderFeatures needs at least one layer")
        shape = self.layers[0].shape
        if any(l.shape != shape for l in self.layers):
            raise DataError("encoder layers disagree on shape")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_tokens(self) -> int:
        return self.layers[0].shape[0]


@dataclass
class CandidateSet:
    """Tokens promoted to decoder queries, with their provenance."""

    features: torch.Tensor  # [n_candidates, D]
    layer_index: torch.Tensor  # [n_candidates] long, 0-based encoder layer
    token_index: torch.Tensor  # [n_candidates] long, flat grid position
    scores: torch.Tensor  # [n_candidates] relevance at selection time

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class SpatialPredictions:
    """Decoder outputs; boxes are center-form, everything sigmoid-bounded."""

    boxes: torch.Tensor  # [Q, 4]
    objectness: torch.Tensor  # [Q]


@dataclass
class FramePrediction:
    box: BoundingBox
    objectness: float


class SelfAttention(nn.Module):
    """Dense bidirectional multi-head attention, optionally masked."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        t, d = x.shape
        hs = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=1)
        q = q.view(t, self.n_heads, hs).transpose(0, 1)
        k = k.view(t, self.n_heads, hs).transpose(0, 1)
        v = v.view(t, self.n_heads, hs).transpose(0, 1)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hs)
        if mask is not None:
            att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        return self.proj((att @ v).transpose(0, 1).reshape(t, d))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.kv_proj = nn.Linear(dim, 2 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        tq, d = queries.shape
        tm = memory.shape[0]
        hs = d // self.n_heads
        q = self.q_proj(queries).view(tq, self.n_heads, hs).transpose(0, 1)
        k, v = self.kv_proj(memory).split(d, dim=1)
        k = k.view(tm, self.n_heads, hs).transpose(0, 1)
        v = v.view(tm, self.n_heads, hs).transpose(0, 1)
        att = F.softmax((q @ k.transpose(-2, -1)) / math.sqrt(hs), dim=-1)
        return self.proj((att @ v).transpose(0, 1).reshape(tq, d))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = SelfAttention(dim, n_heads)
        self.ln_2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.self_attn = SelfAttention(dim, n_heads)
        self.ln_2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.cross_attn = CrossAttention(dim, n_heads)
        self.ln_3 = nn.LayerNorm(dim, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=DTYPE),
        )

    def forward(
        self, q: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor | None
    ) -> torch.Tensor:
        q = q + self.self_attn(self.ln_1(q), mask)
        q = q + self.cross_attn(self.ln_2(q), memory)
        return q + self.mlp(self.ln_3(q))


def _inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x / (1.0 - x))


class SpatialDecoder(nn.Module):
    """Encoder + multi-layer candidate selection + box/objectness decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.lift = nn.Linear(config.feature_dim, d, dtype=DTYPE)
        self.encoder = nn.ModuleList(
            EncoderBlock(d, config.n_heads) for _ in range(config.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderBlock(d, config.n_heads) for _ in range(config.decoder_layers)
        )
        self.box_head = nn.Sequential(
            nn.Linear(d, d, dtype=DTYPE), nn.GELU(), nn.Linear(d, 4, dtype=DTYPE)
        )
        self.obj_head = nn.Linear(d, 1, dtype=DTYPE)
        self.dn_proj = nn.Linear(4, d, dtype=DTYPE)

    def encode_image(self, frame: torch.Tensor) -> EncoderFeatures:
        """Refine one frame [H, W, feature_dim]; returns all layer outputs."""
        h, w = self.config.grid
        if frame.shape != (h, w, self.config.feature_dim):
            raise DataError(
                f"frame shape {tuple(frame.shape)}, want ({h}, {w}, {self.config.feature_dim})"
            )
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
        )
        positions = torch.stack(
            [torch.zeros(h * w, dtype=DTYPE), xs.reshape(-1), ys.reshape(-1)], dim=1
        )
        x = self.lift(frame.reshape(h * w, -1).to(DTYPE)) + POS_SCALE * pos_embed(
            positions, self.config.dim
        )
        layers = []
        for block in self.encoder:
            x = block(x)
            layers.append(x)
        return EncoderFeatures(layers)

    def select_topk(
        self,
        feats: EncoderFeatures,
        q_bridge: torch.Tensor,
        k: int | None = None,
        last_layer_only: bool = False,
        relevance: str = "mean",
    ) -> CandidateSet:
        """Promote the k most query-relevant tokens of each encoder layer.

        Relevance is cosine similarity against the mean bridge vector (or the
        per-token max over bridge vectors in "max" mode). Ties break toward
        the lower token index. An empty bridge (M = 0 ablation) scores every
        token 0, so selection degrades to the first k indices.
        """
        if relevance not in RELEVANCE_MODES:
            raise DataError(f"relevance must be one of {RELEVANCE_MODES}")
        k = self.config.top_k if k is None else k
        if k < 1 or k > feats.n_tokens:
            raise DataError(f"top_k {k} out of range for {feats.n_tokens} tokens")
        layer_ids = [feats.n_layers - 1] if last_layer_only else range(feats.n_layers)
        feat_rows, layer_idx, token_idx, scores = [], [], [], []
        for l in layer_ids:
            tokens = feats.layers[l]
            if q_bridge.shape[0] == 0:
                rel = torch.zeros(feats.n_tokens, dtype=DTYPE)
            elif relevance == "mean":
                rel = safe_cosine(tokens, q_bridge.mean(dim=0))
            else:
                sims = torch.stack([safe_cosine(tokens, q) for q in q_bridge])
                rel = sims.max(dim=0).values
            # Stable sort on the negated scores: equal scores keep ascending
            # token order, which is exactly the lower-index tie-break.
            order = torch.argsort(-rel, stable=True)[:k]
            feat_rows.append(tokens[order])
            layer_idx.append(torch.full((k,), l, dtype=torch.long))
            token_idx.append(order)
            scores.append(rel[order])
        return CandidateSet(
            features=torch.cat(feat_rows),
            layer_index=torch.cat(layer_idx),
            token_index=torch.cat(token_idx),
            scores=torch.cat(scores),
        )

    def _cell_references(self, token_index: torch.Tensor) -> torch.Tensor:
        """Center-form box prior at each candidate's source grid cell.

        The box head predicts offsets in logit space from these anchors, so
        fresh queries start with positionally distinct boxes instead of all
        collapsing onto sigmoid(0). Size prior is a 2x2-cell box.
        """
        h, w = self.config.grid
        r = torch.div(token_index, w, rounding_mode="floor").to(DTYPE)
        c = (token_index % w).to(DTYPE)
        return torch.stack(
            [
                (c + 0.5) / w,
                (r + 0.5) / h,
                torch.full_like(c, 2.0 / w),
                torch.full_like(r, 2.0 / h),
            ],
            dim=1,
        )

    def decode(
        self,
        feats: EncoderFeatures,
        candidates: CandidateSet,
        dn_queries: torch.Tensor | None = None,
        attn_mask: torch.Tensor | None = None,
    ) -> Tuple[SpatialPredictions, SpatialPredictions | None]:
        """Decode candidates (plus optional dn query boxes) against E^n.

        Returns (matching predictions, dn predictions or None). ``attn_mask``
        is [Q_total, Q_total] bool with True meaning "may not attend"; it is
        required whenever dn queries are present. Each query's box is the
        sigmoid of the head output plus its reference anchor in logit space:
        the source cell for candidates, the noised box itself for dn queries.
        """
        queries = candidates.features
        n_match = queries.shape[0]
        references = self._cell_references(candidates.token_index)
        if dn_queries is not None and dn_queries.shape[0] > 0:
            if attn_mask is None:
                raise DataError("dn queries require an attention mask")
            queries = torch.cat([queries, self.dn_proj(dn_queries.to(DTYPE))])
            references = torch.cat([references, dn_queries.to(DTYPE)])
        total = queries.shape[0]
        if attn_mask is not None and attn_mask.shape != (total, total):
            raise DataError(
                f"attention mask shape {tuple(attn_mask.shape)} does not match "
                f"{total} queries"
            )
        memory = feats.layers[-1]
        for block in self.decoder:
            queries = block(queries, memory, attn_mask)
        boxes = torch.sigmoid(self.box_head(queries) + _inverse_sigmoid(references))
        objectness = torch.sigmoid(self.obj_head(queries)).squeeze(-1)
        match = SpatialPredictions(boxes[:n_match], objectness[:n_match])
        dn = None
        if total > n_match:
            dn = SpatialPredictions(boxes[n_match:], objectness[n_match:])
        return match, dn

    def predict_frame(
        self,
        frame: torch.Tensor,
        q_bridge: torch.Tensor,
        last_layer_only: bool = False,
        relevance: str = "mean",
    ) -> FramePrediction:
        """Full per-frame cascade; returns the argmax-objectness box."""
        with torch.no_grad():
            feats = self.encode_image(frame)
            candidates = self.select_topk(
                feats, q_bridge, last_layer_only=last_layer_only, relevance=relevance
            )
            preds, _ = self.decode(feats, candidates)
        best = int(torch.argmax(preds.objectness))
        cx, cy, w, h = (float(v) for v in preds.boxes[best])
        return FramePrediction(
            box=BoundingBox.from_center(cx, cy, w, h),
            objectness=float(preds.objectness[best]),
        )
