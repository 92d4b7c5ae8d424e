"""Scratch: evaluate a saved probe checkpoint. Delete before commit."""
import json
import sys
import time

from tubegrounder.pipeline import evaluate, load_checkpoint
from tubegrounder.synthdata import generate_scene, quality_filter, random_scene_spec


def build_samples(n=32, seed_base=1000, prefix="train"):
    specs = [
        random_scene_spec(seed=seed_base + i, scene_id=f"{prefix}_{i}")
        for i in range(n)
    ]
    kept, dropped = quality_filter(generate_scene(s) for s in specs)
    assert not dropped
    return kept


def main():
    path = sys.argv[1]
    model, step = load_checkpoint(path)
    train_set = build_samples()
    held = build_samples(seed_base=2000, prefix="held")
    out = {"checkpoint": path, "step": step}
    t0 = time.time()
    pred = evaluate(model, train_set, mode="predicted")
    out["train_pred_s"] = round(time.time() - t0, 1)
    t0 = time.time()
    orac = evaluate(model, train_set, mode="oracle")
    out["train_oracle_s"] = round(time.time() - t0, 1)
    out["train_m_tiou"] = round(pred.report.m_tiou, 4)
    out["train_m_viou_pred"] = round(pred.report.m_viou, 4)
    out["train_m_viou_oracle"] = round(orac.report.m_viou, 4)
    out["train_parse_failures"] = pred.parse_failures
    hp = evaluate(model, held, mode="predicted")
    ho = evaluate(model, held, mode="oracle")
    out["held_m_tiou"] = round(hp.report.m_tiou, 4)
    out["held_m_viou_pred"] = round(hp.report.m_viou, 4)
    out["held_m_viou_oracle"] = round(ho.report.m_viou, 4)
    print(json.dumps(out))


if __name__ == "__main__":
    main()
