"""Tests for the loss stack: closed forms, oracles, bounds, and gradients."""

import math

import numpy as np
import pytest
import torch

from tubegrounder.errors import DataError
from tubegrounder.geometry import box_giou
from tubegrounder.gradcheck import gradcheck
from tubegrounder.losses import (
    LossWeights,
    MatchResult,
    SpatialTerms,
    alignment_loss,
    assign_min_cost,
    build_denoising_queries,
    center_to_corner,
    corner_to_center,
    denoising_loss,
    detection_losses,
    dn_attention_mask,
    giou_pairs,
    hungarian_match,
    log_tau_parameter,
    spatial_loss,
    token_loss,
    total_loss,
)
from tubegrounder.spatial_decoder import CandidateSet, EncoderFeatures, SpatialPredictions
from tubegrounder.transformer import DTYPE

from helpers import build_loss_closures, random_box
from oracles import hungarian_bruteforce

WEIGHTS = LossWeights()


def preds_of(boxes, objectness) -> SpatialPredictions:
    return SpatialPredictions(
        boxes=torch.tensor(boxes, dtype=DTYPE),
        objectness=torch.tensor(objectness, dtype=DTYPE),
    )


def test_token_loss_uniform_logits_is_log_vocab():
    logits = torch.zeros(5, 23, dtype=DTYPE)
    targets = torch.arange(5, dtype=torch.long)
    mask = torch.ones(5, dtype=torch.bool)
    assert float(token_loss(logits, targets, mask)) == pytest.approx(math.log(23), rel=1e-12)


def test_token_loss_ignores_unmasked_positions():
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.standard_normal((6, 9)))
    targets = torch.from_numpy(rng.integers(0, 9, size=6))
    mask = torch.tensor([False, True, True, False, True, False])
    noisy = logits.clone()
    noisy[~mask] = 1e6
    assert torch.equal(token_loss(logits, targets, mask), token_loss(noisy, targets, mask))


def test_token_loss_vanishes_with_margin():
    targets = torch.tensor([2, 0], dtype=torch.long)
    logits = torch.full((2, 4), -30.0, dtype=DTYPE)
    logits[0, 2] = 30.0
    logits[1, 0] = 30.0
    assert float(token_loss(logits, targets, torch.ones(2, dtype=torch.bool))) < 1e-9


def test_token_loss_rejects_empty_mask():
    with pytest.raises(DataError, match="mask"):
        token_loss(torch.zeros(3, 4, dtype=DTYPE), torch.zeros(3, dtype=torch.long),
                   torch.zeros(3, dtype=torch.bool))


def test_giou_pairs_matches_scalar_reference():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = random_box(rng), random_box(rng)
        got = giou_pairs(
            torch.tensor([a.as_corner()], dtype=DTYPE),
            torch.tensor([b.as_corner()], dtype=DTYPE),
        )
        assert float(got[0]) == pytest.approx(box_giou(a, b), abs=1e-12)


def test_giou_pairs_broadcasts_like_nested_loops():
    rng = np.random.default_rng(2)
    a = [random_box(rng) for _ in range(4)]
    b = [random_box(rng) for _ in range(3)]
    ta = torch.tensor([x.as_corner() for x in a], dtype=DTYPE)
    tb = torch.tensor([x.as_corner() for x in b], dtype=DTYPE)
    matrix = giou_pairs(ta[:, None, :], tb[None, :, :])
    for i in range(4):
        for j in range(3):
            assert float(matrix[i, j]) == pytest.approx(box_giou(a[i], b[j]), abs=1e-12)


def test_box_form_conversions_round_trip():
    rng = np.random.default_rng(3)
    boxes = torch.from_numpy(rng.uniform(0.1, 0.4, size=(16, 4)))
    assert torch.allclose(corner_to_center(center_to_corner(boxes)), boxes, atol=1e-12)


def test_assignment_matches_permutation_bruteforce():
    rng = np.random.default_rng(4)
    for trial in range(100):
        q = int(rng.integers(1, 7))
        g = int(rng.integers(1, q + 1))
        cost = rng.uniform(0, 10, size=(q, g))
        result = assign_min_cost(cost)
        assert result.cost == pytest.approx(hungarian_bruteforce(cost.tolist()), abs=1e-12)
        assert len(result.pred_index) == g
        assert sorted(result.gt_index) == list(range(g))
        assert sorted(result.pred_index + result.unmatched) == list(range(q))


def test_assignment_with_zero_gts():
    result = assign_min_cost(np.zeros((3, 0)))
    assert result.pred_index == [] and result.gt_index == []
    assert result.unmatched == [0, 1, 2]
    assert result.cost == 0.0


def test_single_pair_always_matches():
    result = assign_min_cost(np.array([[123.4]]))
    assert result.pred_index == [0] and result.gt_index == [0]
    assert result.unmatched == []


def test_match_cost_prefers_geometry_over_objectness():
    # The 5x box and 2x giou terms outweigh the 1x objectness term, so the
    # accurate low-confidence prediction wins the assignment.
    boxes = [[0.5, 0.5, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]]
    objectness = [0.05, 0.95]
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=DTYPE)
    result = hungarian_match(
        torch.tensor(objectness, dtype=DTYPE), torch.tensor(boxes, dtype=DTYPE), gt, WEIGHTS
    )
    assert result.pred_index == [0]
    assert result.unmatched == [1]


def detect(preds: SpatialPredictions, gt: torch.Tensor):
    match = hungarian_match(preds.objectness, preds.boxes, gt, WEIGHTS)
    return detection_losses(preds, gt, match)


def test_detection_losses_vanish_in_the_perfect_limit():
    gt = torch.tensor([[0.4, 0.6, 0.2, 0.3]], dtype=DTYPE)
    preds = preds_of([[0.4, 0.6, 0.2, 0.3], [0.8, 0.2, 0.1, 0.1]], [1 - 1e-12, 1e-12])
    det = detect(preds, gt)
    assert float(det.obj) < 1e-9
    assert float(det.box) == 0.0
    assert float(det.giou) < 1e-12
    assert det.match.pred_index == [0]


def test_l_box_is_the_four_coordinate_mean():
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=DTYPE)
    preds = preds_of([[0.6, 0.5, 0.2, 0.2]], [0.9])
    det = detect(preds, gt)
    assert float(det.box) == pytest.approx(0.025, rel=1e-9)


def test_detection_losses_without_gt():
    preds = preds_of([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]], [0.4, 0.2])
    det = detect(preds, torch.zeros(0, 4, dtype=DTYPE))
    assert float(det.box) == 0.0 and float(det.giou) == 0.0
    expected = -(math.log(0.6) + math.log(0.8)) / 2
    assert float(det.obj) == pytest.approx(expected, rel=1e-12)
    assert det.match.unmatched == [0, 1]


def test_detection_losses_validate_match_indices():
    preds = preds_of([[0.5, 0.5, 0.2, 0.2]], [0.4])
    stale = MatchResult([3], [0], [], 0.0)
    with pytest.raises(DataError, match="match indices"):
        detection_losses(preds, torch.zeros(1, 4, dtype=DTYPE), stale)


def flat_features(n_tokens=10, dim=12):
    return EncoderFeatures([torch.ones(n_tokens, dim, dtype=DTYPE)])


def pick(feats: EncoderFeatures, token_indices) -> CandidateSet:
    idx = torch.as_tensor(token_indices, dtype=torch.long)
    return CandidateSet(
        features=feats.layers[0][idx],
        layer_index=torch.zeros(len(token_indices), dtype=torch.long),
        token_index=idx,
        scores=torch.zeros(len(token_indices), dtype=DTYPE),
    )


def test_alignment_equal_logits_closed_form():
    feats = flat_features()
    cands = pick(feats, [0, 1])
    q = torch.ones(2, 12, dtype=DTYPE)
    gen = torch.Generator().manual_seed(0)
    loss = alignment_loss(cands, feats, q, tau=0.07, generator=gen, n_negatives=5)
    assert float(loss) == pytest.approx(math.log(6), rel=1e-12)


def test_alignment_zero_negatives_is_exactly_zero():
    feats = flat_features()
    cands = pick(feats, [0])
    gen = torch.Generator().manual_seed(0)
    loss = alignment_loss(cands, feats, torch.ones(1, 12, dtype=DTYPE), 0.07, gen, n_negatives=0)
    assert float(loss) == 0.0


def test_alignment_saturates_with_perfect_separation():
    v = torch.ones(12, dtype=DTYPE)
    tokens = -v.repeat(10, 1)
    tokens[0] = v
    feats = EncoderFeatures([tokens])
    cands = pick(feats, [0])
    gen = torch.Generator().manual_seed(0)
    loss = alignment_loss(cands, feats, v.unsqueeze(0), 0.07, gen, n_negatives=16)
    assert 0.0 <= float(loss) < 1e-9


def test_alignment_uses_what_negatives_exist():
    # 10 tokens, 2 selected, 8 unselected but 16 requested: the softmax sees
    # 1 + 8 equal logits.
    feats = flat_features()
    cands = pick(feats, [0, 1])
    gen = torch.Generator().manual_seed(1)
    loss = alignment_loss(cands, feats, torch.ones(1, 12, dtype=DTYPE), 0.07, gen, n_negatives=16)
    assert float(loss) == pytest.approx(math.log(9), rel=1e-12)


def test_alignment_decreases_as_positive_cosine_rises():
    rng = np.random.default_rng(5)
    fixed = torch.from_numpy(rng.standard_normal((5, 12)))
    anchor = torch.zeros(12, dtype=DTYPE)
    anchor[0] = 1.0
    orth = torch.zeros(12, dtype=DTYPE)
    orth[1] = 1.0
    losses = []
    for theta in [1.2, 0.9, 0.6, 0.3, 0.0]:
        positive = math.cos(theta) * anchor + math.sin(theta) * orth
        tokens = torch.cat([positive.unsqueeze(0), fixed])
        feats = EncoderFeatures([tokens])
        cands = pick(feats, [0])
        gen = torch.Generator().manual_seed(2)
        losses.append(
            float(alignment_loss(cands, feats, anchor.unsqueeze(0), 0.5, gen, n_negatives=5))
        )
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_alignment_determinism_and_negative_resampling():
    rng = np.random.default_rng(6)
    feats = EncoderFeatures([torch.from_numpy(rng.standard_normal((14, 12)))])
    cands = pick(feats, [0, 3, 7])
    q = torch.from_numpy(rng.standard_normal((2, 12)))

    def run(seed, share):
        gen = torch.Generator().manual_seed(seed)
        return float(
            alignment_loss(cands, feats, q, 0.07, gen, n_negatives=3, share_negatives=share)
        )

    assert run(1, False) == run(1, False)
    assert run(1, False) != run(2, False)
    assert run(1, True) != run(1, False)


def test_alignment_rejects_empty_candidates():
    feats = flat_features()
    empty = CandidateSet(
        torch.zeros(0, 12, dtype=DTYPE),
        torch.zeros(0, dtype=torch.long),
        torch.zeros(0, dtype=torch.long),
        torch.zeros(0, dtype=DTYPE),
    )
    with pytest.raises(DataError, match="at least one"):
        alignment_loss(empty, feats, torch.ones(1, 12, dtype=DTYPE), 0.07,
                       torch.Generator().manual_seed(0))


GT_BOX = torch.tensor([0.5, 0.5, 0.2, 0.3], dtype=DTYPE)


def test_dn_zero_noise_reproduces_gt():
    gen = torch.Generator().manual_seed(0)
    batch = build_denoising_queries(GT_BOX, gen, noise_scale=0.0, n_groups=3)
    assert batch.queries.shape == (6, 4)
    assert batch.positive.tolist() == [True, False] * 3
    for row in batch.queries[batch.positive]:
        assert torch.equal(row, GT_BOX)


def reconstruct_magnitudes(row: torch.Tensor) -> list:
    cx, cy, w, h = GT_BOX.tolist()
    qcx, qcy, qw, qh = row.tolist()
    return [abs(qcx - cx) / w, abs(qcy - cy) / h, abs(qw / w - 1), abs(qh / h - 1)]


def test_dn_jitter_magnitudes_stay_in_their_bands():
    gen = torch.Generator().manual_seed(7)
    seen_negative_sign = False
    for _ in range(1000):
        batch = build_denoising_queries(GT_BOX, gen, noise_scale=0.4, n_groups=1)
        for m in reconstruct_magnitudes(batch.queries[0]):
            assert 0.0 <= m < 0.2
        for m in reconstruct_magnitudes(batch.queries[1]):
            assert 0.2 <= m <= 0.4
        if batch.queries[0][0] < GT_BOX[0]:
            seen_negative_sign = True
    assert seen_negative_sign


def test_dn_is_deterministic_given_the_generator():
    a = build_denoising_queries(GT_BOX, torch.Generator().manual_seed(3))
    b = build_denoising_queries(GT_BOX, torch.Generator().manual_seed(3))
    assert torch.equal(a.queries, b.queries)


def test_dn_attention_mask_block_structure():
    mask = dn_attention_mask(4, 2)
    assert mask.shape == (8, 8)
    assert not mask[:4, :4].any()
    assert mask[:4, 4:].all()
    assert mask[4:, :4].all()
    assert not mask[4:6, 4:6].any()
    assert not mask[6:8, 6:8].any()
    assert mask[4:6, 6:8].all()
    assert mask[6:8, 4:6].all()


def test_denoising_loss_perfect_reconstruction():
    gen = torch.Generator().manual_seed(0)
    batch = build_denoising_queries(GT_BOX, gen, n_groups=2)
    boxes = torch.where(batch.positive[:, None], GT_BOX.expand(4, 4), batch.queries)
    preds = SpatialPredictions(
        boxes=boxes, objectness=torch.where(batch.positive, 1 - 1e-12, 1e-12).to(DTYPE)
    )
    assert float(denoising_loss(preds, batch, WEIGHTS)) < 1e-9


def test_denoising_loss_zero_weights_and_mismatch():
    gen = torch.Generator().manual_seed(1)
    batch = build_denoising_queries(GT_BOX, gen, n_groups=2)
    preds = SpatialPredictions(
        boxes=torch.rand(4, 4, dtype=DTYPE), objectness=torch.rand(4, dtype=DTYPE)
    )
    silent = LossWeights(dn_cls=0.0, dn_box=0.0, dn_giou=0.0)
    assert float(denoising_loss(preds, batch, silent)) == 0.0
    short = SpatialPredictions(preds.boxes[:2], preds.objectness[:2])
    with pytest.raises(DataError, match="dn"):
        denoising_loss(short, batch, WEIGHTS)


def test_spatial_loss_unit_components():
    terms = SpatialTerms(1.0, 1.0, 1.0, 1.0, 1.0)
    assert float(spatial_loss([terms], WEIGHTS)) == pytest.approx(5.5, rel=1e-12)
    zero = SpatialTerms(0.0, 0.0, 0.0, 0.0, 0.0)
    assert float(spatial_loss([zero], WEIGHTS)) == 0.0
    no_align = LossWeights(align=0.0)
    assert float(spatial_loss([terms], no_align)) == pytest.approx(4.5, rel=1e-12)
    with pytest.raises(DataError, match="at least one frame"):
        spatial_loss([], WEIGHTS)


def test_total_loss_weighting():
    assert float(total_loss(2.0, 5.0, WEIGHTS)) == pytest.approx(2.1, rel=1e-12)
    assert float(total_loss(0.0, 0.0, WEIGHTS)) == 0.0
    even = LossWeights(token=1.0, spatial=1.0)
    assert float(total_loss(2.0, 5.0, even)) == pytest.approx(7.0, rel=1e-12)


def test_loss_weights_reject_negatives():
    with pytest.raises(DataError, match=">= 0"):
        LossWeights(giou=-0.1)


def test_log_tau_starts_at_the_configured_temperature():
    log_tau = log_tau_parameter(WEIGHTS)
    assert log_tau.requires_grad
    assert float(log_tau.detach().exp()) == pytest.approx(0.07, rel=1e-12)


def test_every_component_passes_gradcheck():
    closures = build_loss_closures(seed=0)
    for name, (loss_fn, params) in closures.items():
        report = gradcheck(loss_fn, params, n_coords=2, seed=5)
        assert report.passed(1e-3), f"{name}: {report.worst}"


def test_components_are_nonnegative_on_random_inputs():
    rng = np.random.default_rng(8)
    for trial in range(20):
        q = int(rng.integers(1, 5))
        g = int(rng.integers(0, 2))
        preds = preds_of(
            rng.uniform(0.05, 0.6, size=(q, 4)).tolist(),
            rng.uniform(0.01, 0.99, size=q).tolist(),
        )
        gt = torch.from_numpy(rng.uniform(0.2, 0.4, size=(g, 4)))
        det = detect(preds, gt)
        assert float(det.obj) >= 0 and float(det.box) >= 0 and float(det.giou) >= 0
        feats = EncoderFeatures([torch.from_numpy(rng.standard_normal((8, 12)))])
        cands = pick(feats, [0, 2])
        gen = torch.Generator().manual_seed(trial)
        align = alignment_loss(
            cands, feats, torch.from_numpy(rng.standard_normal((2, 12))), 0.07, gen, 4
        )
        assert float(align) >= 0
