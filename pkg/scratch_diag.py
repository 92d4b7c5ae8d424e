"""Scratch: spatial head diagnosis on a trained checkpoint. Delete before commit."""
import json
import sys

import torch

from tubegrounder.geometry import box_giou
from tubegrounder.losses import LossWeights, hungarian_match
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
    weights = LossWeights()
    for s in samples[:3]:
        ids = model.answer_ids_for(s.gt.window)
        full, hidden, _, _ = model.run_with_answer(s, ids)
        q = model.bridge_queries(hidden, full.roles)
        frames = sorted(s.gt.boxes)[:2]
        for f in frames:
            feats = model.decoder.encode_image(torch.as_tensor(s.frames[f], dtype=DTYPE))
            cands = model.decoder.select_topk(feats, q)
            preds, _ = model.decoder.decode(feats, cands)
            gt = torch.tensor([s.gt.boxes[f].as_center()], dtype=DTYPE)
            match = hungarian_match(preds.objectness, preds.boxes, gt, weights)
            mi = match.pred_index[0]
            ai = int(torch.argmax(preds.objectness))
            def g(i):
                from tubegrounder.geometry import BoundingBox
                b = preds.boxes[i].tolist()
                return round(box_giou(BoundingBox.from_center(*b), s.gt.boxes[f]), 3)
            print(
                json.dumps(
                    {
                        "sample": s.sample_id,
                        "frame": f,
                        "matched": mi,
                        "argmax": ai,
                        "obj_matched": round(float(preds.objectness[mi]), 3),
                        "obj_argmax": round(float(preds.objectness[ai]), 3),
                        "obj_mean": round(float(preds.objectness.mean()), 3),
                        "giou_matched": g(mi),
                        "giou_argmax": g(ai),
                        "obj_top5": [round(float(v), 3) for v in preds.objectness.topk(5).values],
                    }
                )
            )


if __name__ == "__main__":
    main()
