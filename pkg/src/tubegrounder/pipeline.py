"""End-to-end training, cascaded inference, evaluation, and analyses.

Training runs one video per step: assemble the interleaved sequence with the
teacher-forced answer, read the token loss and the bridge queries off one
substrate forward pass, then drive the spatial decoder over a P/N frame batch
and combine everything into the weighted composite. Inference decodes the
temporal answer greedily, parses it, and localizes only the frames inside the
resulting window; the oracle mode swaps in the ground-truth window to bound
what the spatial half could achieve.

Everything is deterministic given RunConfig.seed: per-step randomness comes
from seed sequences keyed on (seed, step), model init from the model seed.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .assembly import ETA_MODES, assemble_sequence, format_timestamp, text_sequence
from .bridging import BridgingState, extend_with_det_and_queries, extract_bridging
from .errors import DataError, NumericError
from .frame_sampling import FrameBatch, pair_frames, pn_sample
from .geometry import TemporalWindow, Tube, window_frames
from .losses import (
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
from .metrics import BinRow, EvalSample, MetricReport, build_report, tiou_bin_report
from .spatial_decoder import PairedFrameLift, SpatialDecoder
from .synthdata import VideoSample
from .transformer import (
    DTYPE,
    ModelConfig,
    Substrate,
    TokenEmbeddingSequence,
    init_weights,
)

CHECKPOINT_VERSION = 1
RELEVANCE_CHOICES = ("mean", "max")

_ANSWER_RE = re.compile(r"\s*(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?)\s*(?:\[DET\])?\s*")


@dataclass
class RunConfig:
    """One training/evaluation run, ablation switches included."""

    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    n_positive: int = 8
    n_negative: int = 2
    eta_mode: str = "full"  # full | naive | off
    pad_timestamps: bool = False
    no_stsb: bool = False
    single_layer_select: bool = False
    relevance: str = "mean"
    share_negatives: bool = False
    steps: int = 2000
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    spatial_delay_fraction: float = 0.3
    seed: int = 0
    dataset: str | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.eta_mode not in ETA_MODES:
            raise DataError(f"eta_mode must be one of {ETA_MODES}, got {self.eta_mode!r}")
        if self.relevance not in RELEVANCE_CHOICES:
            raise DataError(f"relevance must be one of {RELEVANCE_CHOICES}")
        if self.n_positive < 1 or self.n_negative < 0:
            raise DataError("need n_positive >= 1 and n_negative >= 0")
        if self.steps < 0 or self.learning_rate <= 0:
            raise DataError("steps must be >= 0 and learning_rate positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise DataError("warmup_fraction must lie in [0, 1]")
        if not 0.0 <= self.spatial_delay_fraction < 1.0:
            raise DataError("spatial_delay_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown run config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "model" in kwargs:
            model = dict(kwargs["model"])
            if "grid" in model:
                model["grid"] = tuple(model["grid"])
            kwargs["model"] = ModelConfig(**model)
        if "weights" in kwargs:
            kwargs["weights"] = LossWeights(**kwargs["weights"])
        return RunConfig(**kwargs)

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"run config {path} is not valid JSON: {exc}") from exc
        return RunConfig.from_dict(data)


class GroundingModel(nn.Module):
    """Substrate + bridging + spatial decoder + the alignment temperature."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.run_config = config
        gen = torch.Generator().manual_seed(config.model.seed)
        self.substrate = Substrate(config.model)
        init_weights(self.substrate, gen)
        self.bridging = BridgingState(config.model, gen)
        init_weights(self.bridging, gen)
        self.bridging.reset_projection()
        self.decoder = SpatialDecoder(config.model)
        init_weights(self.decoder, gen)
        self.decoder.lift = PairedFrameLift(self.substrate.pair_proj)
        self.log_tau = log_tau_parameter(config.weights)

    def answer_ids_for(self, window: TemporalWindow) -> List[int]:
        ids = self.substrate.vocab.tokenize(format_timestamp(window))
        ids.append(self.substrate.vocab.det_id)
        return ids

    def assembled(self, sample: VideoSample):
        pairs = pair_frames(sample)
        return assemble_sequence(
            self.substrate,
            pairs,
            sample.query,
            eta_mode=self.run_config.eta_mode,
            pad_timestamps=self.run_config.pad_timestamps,
        )

    def bridge_queries(self, hidden: torch.Tensor, roles: List[str]) -> torch.Tensor:
        if self.run_config.no_stsb:
            return self.bridging.frozen_queries
        return extract_bridging(self.bridging, hidden, roles)

    def run_with_answer(self, sample: VideoSample, answer_ids: Sequence[int]):
        """Forward the full sequence; returns (full_seq, hidden, logits, prefix)."""
        seq = self.assembled(sample)
        full = extend_with_det_and_queries(
            self.substrate,
            self.bridging,
            seq,
            answer_ids,
            include_queries=not self.run_config.no_stsb,
        )
        hidden, logits = self.substrate(full)
        return full, hidden, logits, len(seq)


def save_checkpoint(path, model: GroundingModel, step: int) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "run_config": model.run_config.to_dict(),
            "step": step,
            "state": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> Tuple[GroundingModel, int]:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path} has format_version "
            f"{payload.get('format_version') if isinstance(payload, dict) else '?'}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    model = GroundingModel(RunConfig.from_dict(payload["run_config"]))
    model.load_state_dict(payload["state"])
    return model, int(payload["step"])


@dataclass
class LossBreakdown:
    """Per-step scalar log row; every component is non-negative."""

    total: float
    token: float
    spatial: float
    obj: float
    box: float
    giou: float
    dn: float
    align: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def validate(self) -> None:
        for name, value in self.as_dict().items():
            if not math.isfinite(value):
                raise NumericError(f"loss component {name} is non-finite: {value}")
            if value < -1e-12:
                raise NumericError(f"loss component {name} is negative: {value}")


def _step_generators(seed: int, step: int) -> Tuple[np.random.Generator, torch.Generator, torch.Generator]:
    """Independent per-step streams for P/N sampling, dn jitter, negatives."""
    base = np.random.SeedSequence([seed, step])
    frame_rng = np.random.default_rng(base.spawn(1)[0])
    ints = base.generate_state(2)
    dn_gen = torch.Generator().manual_seed(int(ints[0]))
    align_gen = torch.Generator().manual_seed(int(ints[1]))
    return frame_rng, dn_gen, align_gen


def sample_losses(
    model: GroundingModel, sample: VideoSample, step: int
) -> Tuple[torch.Tensor, LossBreakdown]:
    """The full per-step objective on one video."""
    cfg = model.run_config
    weights = cfg.weights
    answer_ids = model.answer_ids_for(sample.gt.window)
    full, hidden, logits, prefix = model.run_with_answer(sample, answer_ids)
    rows = logits[prefix - 1 : prefix - 1 + len(answer_ids)]
    l_token = token_loss(
        rows,
        torch.as_tensor(answer_ids, dtype=torch.long),
        torch.ones(len(answer_ids), dtype=torch.bool),
    )
    q_bridge = model.bridge_queries(hidden, full.roles)

    frame_rng, dn_gen, align_gen = _step_generators(cfg.seed, step)
    batch: FrameBatch = pn_sample(sample, cfg.n_positive, cfg.n_negative, frame_rng)
    terms: List[SpatialTerms] = []
    for frame in batch.frames:
        feats = model.decoder.encode_image(
            torch.as_tensor(sample.frames[frame.frame_index], dtype=DTYPE)
        )
        cands = model.decoder.select_topk(
            feats,
            q_bridge,
            last_layer_only=cfg.single_layer_select,
            relevance=cfg.relevance,
        )
        if frame.positive:
            gt_center = torch.tensor([frame.gt_box.as_center()], dtype=DTYPE)
            dn = build_denoising_queries(
                gt_center[0], dn_gen, cfg.model.dn_noise, cfg.model.dn_groups
            )
            mask = dn_attention_mask(len(cands), dn.n_groups)
            preds, dn_preds = model.decoder.decode(
                feats, cands, dn_queries=dn.queries, attn_mask=mask
            )
            match = hungarian_match(preds.objectness, preds.boxes, gt_center, weights)
            det = detection_losses(preds, gt_center, match)
            l_dn = denoising_loss(dn_preds, dn, weights)
            l_align = alignment_loss(
                cands,
                feats,
                q_bridge,
                model.log_tau.exp(),
                align_gen,
                n_negatives=weights.negatives,
                share_negatives=cfg.share_negatives,
            )
            terms.append(SpatialTerms(det.obj, det.box, det.giou, l_dn, l_align))
        else:
            preds, _ = model.decoder.decode(feats, cands)
            empty = torch.zeros(0, 4, dtype=DTYPE)
            det = detection_losses(
                preds, empty, hungarian_match(preds.objectness, preds.boxes, empty, weights)
            )
            terms.append(SpatialTerms(det.obj, 0.0, 0.0, 0.0, 0.0))

    l_spatial = spatial_loss(terms, weights)
    total = total_loss(l_token, l_spatial, weights)

    def scalar(x: torch.Tensor | float) -> float:
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    def mean_of(name: str) -> float:
        values = [scalar(getattr(t, name)) for t in terms]
        return sum(values) / len(values)

    breakdown = LossBreakdown(
        total=scalar(total),
        token=scalar(l_token),
        spatial=scalar(l_spatial),
        obj=mean_of("obj"),
        box=mean_of("box"),
        giou=mean_of("giou"),
        dn=mean_of("dn"),
        align=mean_of("align"),
    )
    return total, breakdown


def _lr_factor(step: int, total_steps: int, warmup_fraction: float) -> float:
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return (step + 1) / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _split_param_groups(model: GroundingModel) -> Tuple[list, list]:
    """Sequence-model parameters vs the spatial chain (decoder, bridge, tau).

    The shared frame projection registers under the substrate and stays in
    the sequence group, so it trains from the first step.
    """
    sequence, spatial = [], []
    for name, param in model.named_parameters():
        if name.startswith(("decoder.", "bridging.")) or name == "log_tau":
            spatial.append(param)
        else:
            sequence.append(param)
    return sequence, spatial


def train(
    config: RunConfig, samples: Sequence[VideoSample]
) -> Tuple[GroundingModel, List[dict]]:
    """Train on the sample list round-robin, one video per optimizer step.

    The sequence model follows a warmup-cosine schedule over all steps. The
    spatial chain follows its own warmup-cosine schedule that starts after
    ``spatial_delay_fraction`` of training: candidate selection compares
    image tokens against a readout of sequence-model states, so it is held
    still until those states carry enough query semantics to rank the right
    cells highly. Started cold, selection locks onto arbitrary cells and the
    contrastive alignment then reinforces the mistake.

    Returns the model and the per-step history of loss components and
    learning rates. A non-finite loss aborts with the offending step and
    sample in the error message.
    """
    if not samples:
        raise DataError("cannot train on an empty dataset")
    model = GroundingModel(config)
    sequence_params, spatial_params = _split_param_groups(model)
    optimizer = torch.optim.Adam(
        [{"params": sequence_params}, {"params": spatial_params}],
        lr=config.learning_rate,
    )
    delay = int(round(config.spatial_delay_fraction * config.steps))
    history: List[dict] = []
    for step in range(config.steps):
        sample = samples[step % len(samples)]
        factor = _lr_factor(step, config.steps, config.warmup_fraction)
        if step < delay:
            spatial_factor = 0.0
        else:
            spatial_factor = _lr_factor(
                step - delay, config.steps - delay, config.warmup_fraction
            )
        optimizer.param_groups[0]["lr"] = config.learning_rate * factor
        optimizer.param_groups[1]["lr"] = config.learning_rate * spatial_factor
        try:
            total, breakdown = sample_losses(model, sample, step)
        except DataError:
            raise
        except (NumericError, RuntimeError, ValueError) as exc:
            raise NumericError(
                f"numeric failure at step {step} on sample {sample.sample_id}: {exc}"
            ) from exc
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {step} on sample {sample.sample_id}: "
                f"{breakdown.as_dict()}"
            )
        breakdown.validate()
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        row = {
            "step": step,
            "lr": config.learning_rate * factor,
            "lr_spatial": config.learning_rate * spatial_factor,
            "sample": sample.sample_id,
        }
        row.update(breakdown.as_dict())
        history.append(row)
    return model, history


@dataclass
class TemporalAnswer:
    """Raw generated text plus the window parsed from it."""

    text: str
    window: TemporalWindow
    parsed: bool


def parse_temporal_answer(text: str, duration: float) -> TemporalAnswer:
    """Parse "<float>-<float>" with optional trailing [DET]; never raises.

    Values clamp to [0, duration]; a reversed interval is swapped; anything
    off-grammar falls back to the full-video window, flagged as unparsed.
    """
    if duration < 0:
        raise DataError(f"negative duration {duration}")
    matched = _ANSWER_RE.fullmatch(text)
    if not matched:
        return TemporalAnswer(text, TemporalWindow(0.0, duration), False)
    start, end = (min(max(float(g), 0.0), duration) for g in matched.groups())
    if start > end:
        start, end = end, start
    return TemporalAnswer(text, TemporalWindow(start, end), True)


def greedy_decode(model: GroundingModel, sample: VideoSample) -> List[int]:
    """Greedy token decoding until [DET] or the answer cap.

    If the cap is reached without [DET], the transition token is appended so
    downstream bridging always has a valid anchor.
    """
    substrate = model.substrate
    det_id = substrate.vocab.det_id
    seq = model.assembled(sample)
    start = seq.max_temporal_index + 1
    generated: List[int] = []
    with torch.no_grad():
        for _ in range(model.run_config.model.max_answer_tokens):
            if generated:
                answer = text_sequence(substrate, generated, start)
                full = TokenEmbeddingSequence.concat([seq, answer])
            else:
                full = seq
            _, logits = substrate(full)
            nxt = int(torch.argmax(logits[-1]))
            generated.append(nxt)
            if nxt == det_id:
                break
    if generated[-1] != det_id:
        generated.append(det_id)
    return generated


@dataclass
class CascadeCounter:
    """Instrumentation: every (sample, frame) the spatial decoder touched."""

    decoded: List[Tuple[str, int]] = field(default_factory=list)

    def record(self, sample_id: str, frame_index: int) -> None:
        self.decoded.append((sample_id, frame_index))


def _decode_window_frames(
    model: GroundingModel,
    sample: VideoSample,
    window: TemporalWindow,
    q_bridge: torch.Tensor,
    counter: CascadeCounter | None,
) -> Tube:
    cfg = model.run_config
    boxes = {}
    for f in window_frames(window, sample.fps, sample.n_frames):
        if counter is not None:
            counter.record(sample.sample_id, f)
        pred = model.decoder.predict_frame(
            torch.as_tensor(sample.frames[f], dtype=DTYPE),
            q_bridge,
            last_layer_only=cfg.single_layer_select,
            relevance=cfg.relevance,
        )
        boxes[f] = pred.box
    return Tube(window=window, boxes=boxes)


def infer(
    model: GroundingModel, sample: VideoSample, counter: CascadeCounter | None = None
) -> Tuple[TemporalAnswer, Tube]:
    """Cascaded inference: decode the answer, then localize inside its window."""
    with torch.no_grad():
        generated = greedy_decode(model, sample)
        answer = parse_temporal_answer(
            model.substrate.vocab.detokenize(generated), sample.duration
        )
        seq = model.assembled(sample)
        full = extend_with_det_and_queries(
            model.substrate,
            model.bridging,
            seq,
            generated,
            include_queries=not model.run_config.no_stsb,
        )
        hidden, _ = model.substrate(full)
        q_bridge = model.bridge_queries(hidden, full.roles)
        tube = _decode_window_frames(model, sample, answer.window, q_bridge, counter)
    return answer, tube


def infer_oracle(
    model: GroundingModel, sample: VideoSample, counter: CascadeCounter | None = None
) -> Tube:
    """Like infer, but the ground-truth window replaces the parsed one."""
    with torch.no_grad():
        generated = greedy_decode(model, sample)
        seq = model.assembled(sample)
        full = extend_with_det_and_queries(
            model.substrate,
            model.bridging,
            seq,
            generated,
            include_queries=not model.run_config.no_stsb,
        )
        hidden, _ = model.substrate(full)
        q_bridge = model.bridge_queries(hidden, full.roles)
        return _decode_window_frames(model, sample, sample.gt.window, q_bridge, counter)


@dataclass
class EvalResult:
    mode: str
    report: MetricReport
    bins: List[BinRow] | None
    tubes: List[Tuple[str, Tube]]
    parse_failures: int


def evaluate(
    model: GroundingModel,
    samples: Sequence[VideoSample],
    mode: str = "predicted",
    counter: CascadeCounter | None = None,
) -> EvalResult:
    """Run the cascade over a dataset and report metrics.

    Oracle mode has no temporal prediction, so the temporal-quality metrics
    (m_tIoU, R@1, the tIoU bins) are absent there.
    """
    if mode not in ("predicted", "oracle"):
        raise DataError(f"mode must be predicted or oracle, got {mode!r}")
    if not samples:
        raise DataError("cannot evaluate an empty dataset")
    eval_samples: List[EvalSample] = []
    tubes: List[Tuple[str, Tube]] = []
    parse_failures = 0
    for sample in samples:
        if mode == "predicted":
            answer, tube = infer(model, sample, counter)
            parse_failures += 0 if answer.parsed else 1
        else:
            tube = infer_oracle(model, sample, counter)
        tubes.append((sample.sample_id, tube))
        eval_samples.append(
            EvalSample(sample_id=sample.sample_id, pred=tube, gt=sample.gt, fps=sample.fps)
        )
    predicted = mode == "predicted"
    report = build_report(eval_samples, include_tiou=predicted)
    bins = tiou_bin_report(eval_samples) if predicted else None
    return EvalResult(mode, report, bins, tubes, parse_failures)


@dataclass
class NoisePoint:
    level: float
    mean_viou: float


def controlled_noise_study(
    samples: Sequence[VideoSample],
    noise_levels: Sequence[float] = (0.0, 0.5, 1.0, 1.5, 2.0),
) -> List[NoisePoint]:
    """m_vIoU of gt boxes under increasingly shifted windows; no model involved.

    Each level shifts the window by round(level * fps) frames while keeping
    perfect boxes on the frames that remain inside the true window, isolating
    how temporal error alone degrades the tube metric.
    """
    if not samples:
        raise DataError("noise study needs at least one sample")
    points = []
    for level in noise_levels:
        if level < 0:
            raise DataError(f"negative noise level {level}")
        eval_samples = []
        for sample in samples:
            shift = int(round(level * sample.fps))
            gt_frames = sorted(sample.gt.boxes)
            window = TemporalWindow(
                sample.gt.window.start + shift / sample.fps,
                sample.gt.window.end + shift / sample.fps,
            )
            boxes = {
                f + shift: sample.gt.boxes.get(f + shift, sample.gt.boxes[f])
                for f in gt_frames
            }
            eval_samples.append(
                EvalSample(
                    sample_id=sample.sample_id,
                    pred=Tube(window=window, boxes=boxes),
                    gt=sample.gt,
                    fps=sample.fps,
                )
            )
        report = build_report(eval_samples, include_tiou=False)
        points.append(NoisePoint(level=float(level), mean_viou=report.m_viou))
    return points
