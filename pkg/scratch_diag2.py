"""Scratch: candidate geometry vs objectness. Delete before commit."""
import json
import sys

import torch

from tubegrounder.geometry import BoundingBox, box_giou
from tubegrounder.pipeline import DTYPE, load_checkpoint
from tubegrounder.synthdata import generate_scene, quality_filter, random_scene_spec


def build_samples(n=32, seed_base=1000, prefix="train"):
    specs = [
        random_scene_spec(seed=seed_base + i, scene_id=f"{prefix}_{i}")
        for i in range(n)
    ]
    kept, _ = quality_filter(generate_scene(s) for s in specs)
    return kept


def main():
    model, _ = load_checkpoint(sys.argv[1])
    samples = build_samples()
    h, w = model.run_config.model.grid
    for s in samples[:2]:
        ids = model.answer_ids_for(s.gt.window)
        full, hidden, _, _ = model.run_with_answer(s, ids)
        q = model.bridge_queries(hidden, full.roles)
        f = sorted(s.gt.boxes)[1]
        gt = s.gt.boxes[f]
        feats = model.decoder.encode_image(torch.as_tensor(s.frames[f], dtype=DTYPE))
        cands = model.decoder.select_topk(feats, q)
        preds, _ = model.decoder.decode(feats, cands)
        gx1, gy1, gx2, gy2 = gt.as_corner()
        rows = []
        for j in range(len(cands)):
            t = int(cands.token_index[j])
            r, c = divmod(t, w)
            cx, cy = (c + 0.5) / w, (r + 0.5) / h
            inside = gx1 <= cx <= gx2 and gy1 <= cy <= gy2
            b = BoundingBox.from_center(*preds.boxes[j].tolist())
            rows.append(
                {
                    "layer": int(cands.layer_index[j]),
                    "cell": (r, c),
                    "on_target": inside,
                    "score": round(float(cands.scores[j]), 3),
                    "obj": round(float(preds.objectness[j]), 4),
                    "giou": round(box_giou(b, gt), 3),
                }
            )
        rows.sort(key=lambda d: -d["giou"])
        n_on = sum(r["on_target"] for r in rows)
        print(f"== {s.sample_id} frame {f} gt_corner {gt.as_corner()} on_target {n_on}/48")
        for r in rows[:10]:
            print(json.dumps(r))
        print("... worst:")
        for r in rows[-3:]:
            print(json.dumps(r))


if __name__ == "__main__":
    main()
