"""Scratch: criterion-7 dry run. Delete before commit."""
import json
import sys
import time

import torch
import torch.nn.functional as F

from tubegrounder.geometry import temporal_iou
from tubegrounder.losses import LossWeights
from tubegrounder.pipeline import (
    GroundingModel,
    RunConfig,
    greedy_decode,
    parse_temporal_answer,
    save_checkpoint,
    train,
)
from tubegrounder.synthdata import generate_scene, quality_filter, random_scene_spec


def build_samples(n=32, seed_base=1000, sigma=0.05):
    specs = [
        random_scene_spec(seed=seed_base + i, sigma=sigma, scene_id=f"train_{i}")
        for i in range(n)
    ]
    samples = [generate_scene(s) for s in specs]
    kept, dropped = quality_filter(samples)
    assert len(kept) == n, f"quality filter dropped {len(dropped)}"
    return kept


def token_ce_profile(model, samples):
    per_sample = []
    per_pos = torch.zeros(8)
    for s in samples:
        ids = model.answer_ids_for(s.gt.window)
        _, _, logits, prefix = model.run_with_answer(s, ids)
        rows = logits[prefix - 1 : prefix - 1 + len(ids)]
        ce = F.cross_entropy(rows, torch.as_tensor(ids), reduction="none")
        per_sample.append(float(ce.mean()))
        per_pos += ce.detach()
    return per_sample, (per_pos / len(samples)).tolist()


def main():
    lr = float(sys.argv[1])
    steps = int(sys.argv[2])
    spatial_w = float(sys.argv[3]) if len(sys.argv) > 3 else 0.02
    cfg = RunConfig(
        learning_rate=lr, steps=steps, weights=LossWeights(spatial=spatial_w)
    )
    samples = build_samples()
    t0 = time.time()
    with torch.no_grad():
        pass
    model, history = train(cfg, samples)
    train_s = time.time() - t0
    ema = None
    for row in history:
        ema = row["token"] if ema is None else 0.98 * ema + 0.02 * row["token"]
    per_sample, per_pos = token_ce_profile(model, samples)
    tious = []
    exact = 0
    shown = []
    for s in samples:
        ids = greedy_decode(model, s)
        text = model.substrate.vocab.detokenize(ids)
        ans = parse_temporal_answer(text, s.duration)
        tious.append(temporal_iou(ans.window, s.gt.window))
        want = f"{s.gt.window.start:.1f}-{s.gt.window.end:.1f}"
        if text.replace("[DET]", "") == want:
            exact += 1
        if len(shown) < 8:
            shown.append(f"{want} -> {text}")
    print(
        json.dumps(
            {
                "lr": lr,
                "steps": steps,
                "spatial_w": spatial_w,
                "train_s": round(train_s, 1),
                "final_token_ema": round(ema, 4),
                "ce_mean": round(sum(per_sample) / len(per_sample), 4),
                "ce_max": round(max(per_sample), 4),
                "ce_per_pos": [round(v, 3) for v in per_pos],
                "m_tiou": round(sum(tious) / len(tious), 4),
                "exact": exact,
            }
        )
    )
    for line in shown:
        print(line)
    save_checkpoint(f"/tmp/probe_{lr}_{steps}_{spatial_w}.pt", model, steps)


if __name__ == "__main__":
    main()
