"""Init-state selection structure for a fresh model (no training).

Measures, over window frames of the probe training set:
  hit rate, cosine margins, distinct-cell coverage of the candidate union,
  and the best relevance rank any gt cell achieves per layer.
"""

import json
import sys

import torch

from tubegrounder.bridging import extend_with_det_and_queries
from tubegrounder.geometry import window_frames
from tubegrounder.pipeline import GroundingModel, RunConfig, greedy_decode
from tubegrounder.spatial_decoder import safe_cosine
from tubegrounder.synthdata import generate_scene, quality_filter, random_scene_spec
from tubegrounder.transformer import DTYPE

model = GroundingModel(RunConfig())
model.eval()

samples = [
    generate_scene(random_scene_spec(seed=1000 + i, scene_id=f"train_{i}", sigma=0.05))
    for i in range(16)
]
samples, _ = quality_filter(samples)

h, w = model.run_config.model.grid
centers = torch.stack(
    [
        torch.tensor([(c + 0.5) / w, (r + 0.5) / h], dtype=DTYPE)
        for r in range(h)
        for c in range(w)
    ]
)

frames_n = 0
hits = 0
coverage = []
margins = {}
best_ranks = []

with torch.no_grad():
    for sample in samples:
        generated = greedy_decode(model, sample)
        seq = model.assembled(sample)
        full = extend_with_det_and_queries(
            model.substrate, model.bridging, seq, generated, include_queries=True
        )
        hidden, _ = model.substrate(full)
        q_bridge = model.bridge_queries(hidden, full.roles)
        anchor = q_bridge.mean(dim=0)
        for f in window_frames(sample.gt.window, sample.fps, sample.n_frames):
            gt_box = sample.gt.boxes.get(f)
            if gt_box is None:
                continue
            frames_n += 1
            x1, y1, x2, y2 = gt_box.as_corner()
            inside = (
                (centers[:, 0] >= x1)
                & (centers[:, 0] <= x2)
                & (centers[:, 1] >= y1)
                & (centers[:, 1] <= y2)
            )
            gt_cells = set(torch.nonzero(inside).flatten().tolist())
            frame = torch.as_tensor(sample.frames[f], dtype=DTYPE)
            feats = model.decoder.encode_image(frame)
            cands = model.decoder.select_topk(feats, q_bridge)
            cells = set(cands.token_index.tolist())
            coverage.append(len(cells))
            if cells & gt_cells:
                hits += 1
            for l, toks in enumerate(feats.layers):
                cos = safe_cosine(toks, anchor)
                order = torch.argsort(-cos, stable=True).tolist()
                rank = min(order.index(c) for c in gt_cells)
                best_ranks.append(rank)
                m_gt = cos[list(gt_cells)].mean().item()
                rest = [i for i in range(toks.shape[0]) if i not in gt_cells]
                margins.setdefault(l, []).append(m_gt - cos[rest].mean().item())

best_ranks.sort()
print(
    json.dumps(
        {
            "frames": frames_n,
            "hit_rate": round(hits / frames_n, 4),
            "mean_distinct_cells_of_64": round(sum(coverage) / len(coverage), 2),
            "margin_by_layer": {l: round(sum(v) / len(v), 4) for l, v in margins.items()},
            "gt_best_rank_median": best_ranks[len(best_ranks) // 2],
            "gt_best_rank_p90": best_ranks[int(len(best_ranks) * 0.9)],
        },
        indent=2,
    )
)
