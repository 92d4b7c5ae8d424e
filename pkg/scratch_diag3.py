"""Stage-by-stage diagnosis of the spatial cascade on a trained checkpoint.

For each train sample and each gt-window frame, measures:
  selection: do any of the 48 candidates sit on a gt cell?
  anchor:    cosine margin of gt cells vs the rest, per encoder layer
  ranking:   IoU of the argmax-objectness box vs the best candidate box
"""

import json
import sys

import torch

from tubegrounder.geometry import BoundingBox, box_iou, window_frames
from tubegrounder.losses import LossWeights, hungarian_match
from tubegrounder.pipeline import greedy_decode, load_checkpoint
from tubegrounder.spatial_decoder import safe_cosine
from tubegrounder.synthdata import generate_scene, quality_filter, random_scene_spec
from tubegrounder.transformer import DTYPE

ckpt = sys.argv[1] if len(sys.argv) > 1 else "/tmp/probe_0.001_2000_0.02.pt"
model, step = load_checkpoint(ckpt)
model.eval()

samples = [
    generate_scene(random_scene_spec(seed=1000 + i, scene_id=f"train_{i}", sigma=0.05))
    for i in range(32)
]
samples, dropped = quality_filter(samples)
assert not dropped

h, w = model.run_config.model.grid
cell_centers = torch.stack(
    [
        torch.tensor([(c + 0.5) / w, (r + 0.5) / h], dtype=DTYPE)
        for r in range(h)
        for c in range(w)
    ]
)

n_frames_total = 0
hits = 0
argmax_in_gt = 0
iou_argmax = []
iou_best = []
iou_matched = []
margins = {}
per_sample = []

with torch.no_grad():
    for sample in samples:
        generated = greedy_decode(model, sample)
        from tubegrounder.bridging import extend_with_det_and_queries

        seq = model.assembled(sample)
        full = extend_with_det_and_queries(
            model.substrate, model.bridging, seq, generated, include_queries=True
        )
        hidden, _ = model.substrate(full)
        q_bridge = model.bridge_queries(hidden, full.roles)
        anchor = q_bridge.mean(dim=0)

        s_ious = []
        for f in window_frames(sample.gt.window, sample.fps, sample.n_frames):
            gt_box = sample.gt.boxes.get(f)
            if gt_box is None:
                continue
            n_frames_total += 1
            x1, y1, x2, y2 = gt_box.as_corner()
            inside = (
                (cell_centers[:, 0] >= x1)
                & (cell_centers[:, 0] <= x2)
                & (cell_centers[:, 1] >= y1)
                & (cell_centers[:, 1] <= y2)
            )
            gt_cells = set(torch.nonzero(inside).flatten().tolist())

            frame = torch.as_tensor(sample.frames[f], dtype=DTYPE)
            feats = model.decoder.encode_image(frame)
            cands = model.decoder.select_topk(feats, q_bridge)
            if any(int(t) in gt_cells for t in cands.token_index):
                hits += 1

            for l, toks in enumerate(feats.layers):
                cos = safe_cosine(toks, anchor)
                m_gt = cos[list(gt_cells)].mean().item() if gt_cells else float("nan")
                rest = [i for i in range(toks.shape[0]) if i not in gt_cells]
                m_rest = cos[rest].mean().item()
                margins.setdefault(l, []).append(m_gt - m_rest)

            preds, _ = model.decoder.decode(feats, cands)
            ious = torch.tensor(
                [
                    box_iou(BoundingBox.from_center(*(float(v) for v in b)), gt_box)
                    for b in preds.boxes
                ]
            )
            best = int(torch.argmax(preds.objectness))
            iou_argmax.append(float(ious[best]))
            iou_best.append(float(ious.max()))
            cell = int(cands.token_index[best])
            if cell in gt_cells:
                argmax_in_gt += 1
            gt_c = torch.tensor([gt_box.as_center()], dtype=DTYPE)
            match = hungarian_match(preds.objectness, preds.boxes, gt_c, LossWeights())
            if match.pred_index:
                iou_matched.append(float(ious[match.pred_index[0]]))
            s_ious.append(float(ious[best]))
        per_sample.append(
            {
                "id": sample.sample_id,
                "query": sample.query,
                "mean_iou": round(sum(s_ious) / max(len(s_ious), 1), 3),
            }
        )

out = {
    "frames": n_frames_total,
    "selection_hit_rate": round(hits / n_frames_total, 4),
    "argmax_obj_in_gt_cell": round(argmax_in_gt / n_frames_total, 4),
    "mean_iou_argmax_obj": round(sum(iou_argmax) / len(iou_argmax), 4),
    "mean_iou_best_candidate": round(sum(iou_best) / len(iou_best), 4),
    "mean_iou_matched": round(sum(iou_matched) / len(iou_matched), 4),
    "cos_margin_gt_minus_rest_by_layer": {
        l: round(sum(v) / len(v), 4) for l, v in margins.items()
    },
}
print(json.dumps(out, indent=2))
for row in per_sample:
    print(row)
