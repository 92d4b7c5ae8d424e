"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np

from tubegrounder.geometry import BoundingBox, TemporalWindow, Tube, window_frames
from tubegrounder.metrics import EvalSample


def random_box(rng: np.random.Generator) -> BoundingBox:
    cx, cy = rng.uniform(0.15, 0.85, size=2)
    w, h = rng.uniform(0.05, 0.3, size=2)
    return BoundingBox.from_center(float(cx), float(cy), float(w), float(h))


def random_tube(rng: np.random.Generator, fps: float = 2.0, max_start: int = 16) -> Tube:
    start = rng.integers(0, max_start) / fps
    dur = rng.integers(1, 10) / fps
    window = TemporalWindow(float(start), float(start + dur))
    boxes = {f: random_box(rng) for f in window_frames(window, fps)}
    return Tube(window, boxes)


def random_eval_samples(seed: int, n: int, fps: float = 2.0) -> list[EvalSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(
            EvalSample(
                sample_id=f"s{i:03d}",
                pred=random_tube(rng, fps),
                gt=random_tube(rng, fps),
                fps=fps,
            )
        )
    return out


def make_scene(
    duration=6.0,
    window=(1.0, 3.5),
    grid=(8, 8),
    feature_dim=32,
    sigma=0.0,
    seed=11,
    target_signature=2,
    distractor=True,
    scene_id="fixture",
):
    """Hand-built SceneSpec with a static cell-aligned target track."""
    from tubegrounder.synthdata import SceneSpec

    h, w = grid
    n_frames = int(duration * 2)
    track = np.tile([2.0 / w, 2.0 / h, 2.0 / w, 2.0 / h], (n_frames, 1))
    distractors = []
    if distractor:
        d_track = np.tile([(w - 1.0) / w, 1.0 / h, 2.0 / w, 2.0 / h], (n_frames, 1))
        distractors = [(4, d_track)]
    return SceneSpec(
        scene_id=scene_id,
        duration=duration,
        event_window=TemporalWindow(*window),
        target_signature=target_signature,
        target_track=track,
        distractors=distractors,
        grid=grid,
        feature_dim=feature_dim,
        sigma=sigma,
        seed=seed,
    )


def small_model_config(**overrides):
    """Tiny ModelConfig that keeps forward passes around a millisecond."""
    from tubegrounder.transformer import ModelConfig

    base = dict(
        dim=12,
        n_layers=2,
        n_heads=2,
        grid=(4, 4),
        feature_dim=6,
        bridge_queries=3,
        encoder_layers=2,
        decoder_layers=1,
        top_k=2,
        dn_groups=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_samples(n=2, seed=0, grid=(4, 4), feature_dim=6, n_signatures=4):
    """Small random scenes matching small_model_config's grid and features."""
    from tubegrounder.synthdata import generate_scene, random_scene_spec

    return [
        generate_scene(
            random_scene_spec(
                seed=seed + i,
                scene_id=f"tiny_{i}",
                grid=grid,
                feature_dim=feature_dim,
                n_signatures=n_signatures,
            )
        )
        for i in range(n)
    ]


def small_run_config(**overrides):
    """RunConfig around small_model_config; a few train steps stay subsecond."""
    from tubegrounder.pipeline import RunConfig

    model_overrides = overrides.pop("model_overrides", {})
    base = dict(
        model=small_model_config(n_signatures=4, **model_overrides),
        n_positive=3,
        n_negative=1,
        steps=3,
        seed=5,
    )
    base.update(overrides)
    return RunConfig(**base)


def build_loss_closures(seed=0, n_negatives=4):
    """One tiny model plus scene; a deterministic closure per loss term.

    Returns {name: (loss_fn, named_params)} suitable for gradcheck. Discrete
    choices (candidate indices, dn jitter, alignment negatives) are frozen or
    reseeded inside each closure so finite differences probe only the smooth
    part of the computation.
    """
    import torch

    from tubegrounder.assembly import assemble_sequence, format_timestamp
    from tubegrounder.bridging import (
        BridgingState,
        extend_with_det_and_queries,
        extract_bridging,
    )
    from tubegrounder.frame_sampling import pair_frames
    from tubegrounder.losses import (
        LossWeights,
        SpatialTerms,
        alignment_loss,
        build_denoising_queries,
        denoising_loss,
        detection_losses,
        dn_attention_mask,
        hungarian_match,
        log_tau_parameter,
        spatial_loss,
        token_loss,
        total_loss,
    )
    from tubegrounder.spatial_decoder import CandidateSet, SpatialDecoder
    from tubegrounder.synthdata import generate_scene
    from tubegrounder.transformer import DTYPE, Substrate, init_weights

    config = small_model_config()
    gen = torch.Generator().manual_seed(seed)
    substrate = Substrate(config)
    init_weights(substrate, gen)
    bridging = BridgingState(config, gen)
    decoder = SpatialDecoder(config)
    init_weights(decoder, gen)
    # Start the box head away from the sigmoid midpoint: toy gt boxes are
    # cell-aligned (coordinates like 0.25 and 0.5) and an unbiased start puts
    # the L1/GIoU kinks at |pred - gt| = 0 inside the finite-difference step.
    # A fixed offset keeps every probe on one smooth piece.
    with torch.no_grad():
        decoder.box_head[2].bias.copy_(torch.tensor([0.13, -0.21, 0.4, -0.3], dtype=DTYPE))
    weights = LossWeights(negatives=n_negatives)
    log_tau = log_tau_parameter(weights)

    sample = generate_scene(
        make_scene(grid=config.grid, feature_dim=config.feature_dim, sigma=0.05, seed=seed + 1)
    )
    pairs = pair_frames(sample)
    answer_ids = substrate.vocab.tokenize(format_timestamp(sample.gt.window))
    answer_ids.append(substrate.vocab.det_id)
    frame_index = sorted(sample.gt.boxes)[1]
    frame = torch.as_tensor(sample.frames[frame_index], dtype=DTYPE)
    gt_center = torch.tensor([sample.gt.boxes[frame_index].as_center()], dtype=DTYPE)

    def run_substrate():
        seq = assemble_sequence(substrate, pairs, sample.query)
        full = extend_with_det_and_queries(substrate, bridging, seq, answer_ids)
        hidden, logits = substrate(full)
        return full, hidden, logits, len(seq)

    def answer_loss(logits, prefix):
        rows = logits[prefix - 1 : prefix - 1 + len(answer_ids)]
        targets = torch.as_tensor(answer_ids, dtype=torch.long)
        return token_loss(rows, targets, torch.ones(len(answer_ids), dtype=torch.bool))

    def bridge_now():
        full, hidden, _, _ = run_substrate()
        return extract_bridging(bridging, hidden, full.roles)

    with torch.no_grad():
        frozen = decoder.select_topk(decoder.encode_image(frame), bridge_now())

    def gather_candidates(feats):
        rows = torch.stack(
            [
                feats.layers[int(l)][int(t)]
                for l, t in zip(frozen.layer_index, frozen.token_index)
            ]
        )
        return CandidateSet(rows, frozen.layer_index, frozen.token_index, frozen.scores)

    def decode_now():
        feats = decoder.encode_image(frame)
        cands = gather_candidates(feats)
        preds, _ = decoder.decode(feats, cands)
        return preds

    with torch.no_grad():
        init_preds = decode_now()
        fixed_match = hungarian_match(init_preds.objectness, init_preds.boxes, gt_center, weights)

    def detection_now():
        return detection_losses(decode_now(), gt_center, fixed_match)

    def loss_token():
        _, _, logits, prefix = run_substrate()
        return answer_loss(logits, prefix)

    def loss_align():
        feats = decoder.encode_image(frame)
        cands = gather_candidates(feats)
        g = torch.Generator().manual_seed(seed + 77)
        return alignment_loss(
            cands, feats, bridge_now(), log_tau.exp(), g, n_negatives=weights.negatives
        )

    def loss_dn():
        feats = decoder.encode_image(frame)
        cands = gather_candidates(feats)
        g = torch.Generator().manual_seed(seed + 99)
        dn = build_denoising_queries(gt_center[0], g, n_groups=config.dn_groups)
        mask = dn_attention_mask(len(cands), config.dn_groups)
        _, dn_preds = decoder.decode(feats, cands, dn_queries=dn.queries, attn_mask=mask)
        return denoising_loss(dn_preds, dn, weights)

    def loss_composite():
        full, hidden, logits, prefix = run_substrate()
        l_tok = answer_loss(logits, prefix)
        q = extract_bridging(bridging, hidden, full.roles)
        feats = decoder.encode_image(frame)
        cands = gather_candidates(feats)
        g_dn = torch.Generator().manual_seed(seed + 99)
        dn = build_denoising_queries(gt_center[0], g_dn, n_groups=config.dn_groups)
        mask = dn_attention_mask(len(cands), config.dn_groups)
        preds, dn_preds = decoder.decode(feats, cands, dn_queries=dn.queries, attn_mask=mask)
        det = detection_losses(preds, gt_center, fixed_match)
        g_al = torch.Generator().manual_seed(seed + 77)
        l_align = alignment_loss(
            cands, feats, q, log_tau.exp(), g_al, n_negatives=weights.negatives
        )
        terms = SpatialTerms(
            det.obj, det.box, det.giou, denoising_loss(dn_preds, dn, weights), l_align
        )
        return total_loss(l_tok, spatial_loss([terms], weights), weights)

    substrate_params = list(substrate.named_parameters()) + [
        (f"bridging.{n}", p) for n, p in bridging.named_parameters()
    ]
    decoder_params = list(decoder.named_parameters())
    everything = substrate_params + decoder_params + [("log_tau", log_tau)]
    return {
        "token": (loss_token, substrate_params),
        "obj": (lambda: detection_now().obj, decoder_params),
        "box": (lambda: detection_now().box, decoder_params),
        "giou": (lambda: detection_now().giou, decoder_params),
        "align": (loss_align, everything),
        "dn": (loss_dn, decoder_params),
        "composite": (loss_composite, everything),
    }


def to_oracle_format(sample: EvalSample):
    def conv(tube: Tube):
        return (
            {f: tube.boxes[f].as_corner() for f in tube.boxes},
            (tube.window.start, tube.window.end),
        )

    return conv(sample.pred), conv(sample.gt)
