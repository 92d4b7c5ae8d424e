"""Interleaved sequence assembly: pair tokens, timestamp text, query text.

Each frame pair contributes its grid of visual tokens followed by a short
timestamp string ("<start>-<end>", one decimal) embedded as ordinary text
tokens but placed at virtual grid coordinates (pair_index, W+s, H+s), just
outside the image. The positional sinusoid makes those coordinates distinct
from every real patch position, so time becomes an explicitly addressable
signal rather than an implicit byproduct of token order.

Assembly modes:
  "full"   timestamps at virtual coordinates (the intended configuration)
  "naive"  timestamps present but squashed onto in-grid position (i, 0, 0)
  "off"    no timestamp tokens at all
"""

from __future__ import annotations

from typing import List, Sequence

import torch

from .errors import DataError
from .frame_sampling import FramePair
from .geometry import TemporalWindow
from .transformer import (
    DTYPE,
    ROLE_TEXT,
    ROLE_TIMESTAMP,
    Substrate,
    TokenEmbeddingSequence,
)

ETA_MODES = ("full", "naive", "off")


def format_timestamp(window: TemporalWindow) -> str:
    """Render an interval as "<start>-<end>" with one decimal each."""
    return f"{window.start:.1f}-{window.end:.1f}"


def embed_timestamp(
    substrate: Substrate,
    interval: TemporalWindow,
    pair_index: int,
    mode: str = "full",
    pad_to: int | None = None,
) -> TokenEmbeddingSequence:
    """Embed one timestamp block for a frame pair.

    Token s (1-based) of the block sits at (pair_index, W+s, H+s) in full
    mode, or at (pair_index, 0, 0) in naive mode. ``pad_to`` right-pads with
    space tokens for the fixed-width ablation.
    """
    if mode not in ("full", "naive"):
        raise DataError(f"timestamp mode must be full or naive, got {mode!r}")
    ids = substrate.vocab.tokenize(format_timestamp(interval))
    if pad_to is not None:
        if pad_to < len(ids):
            raise DataError(
                f"pad_to {pad_to} shorter than timestamp of {len(ids)} tokens"
            )
        ids = ids + [substrate.vocab.index[" "]] * (pad_to - len(ids))
    emb = substrate.embed_tokens(ids)
    h, w = substrate.config.grid
    if mode == "full":
        pos = torch.tensor(
            [[float(pair_index), float(w + s), float(h + s)] for s in range(1, len(ids) + 1)],
            dtype=DTYPE,
        )
    else:
        pos = torch.tensor([[float(pair_index), 0.0, 0.0]] * len(ids), dtype=DTYPE)
    return TokenEmbeddingSequence(emb, pos, [ROLE_TIMESTAMP] * len(ids))


def text_sequence(
    substrate: Substrate, ids: Sequence[int], start_index: int, role: str = ROLE_TEXT
) -> TokenEmbeddingSequence:
    """Embed text token ids walking the temporal axis from ``start_index``."""
    emb = substrate.embed_tokens(ids)
    pos = torch.tensor(
        [[float(start_index + j), 0.0, 0.0] for j in range(len(ids))], dtype=DTYPE
    )
    return TokenEmbeddingSequence(emb, pos, [role] * len(ids))


def assemble_sequence(
    substrate: Substrate,
    pairs: Sequence[FramePair],
    query: str,
    eta_mode: str = "full",
    pad_timestamps: bool = False,
) -> TokenEmbeddingSequence:
    """Build [pair_0, ts_0, pair_1, ts_1, ..., query] as one sequence.

    Length is sum(H*W + S_i) + |query| in full/naive mode (S_i varies with
    the rendered width of each interval) and n_pairs*H*W + |query| with
    timestamps off.
    """
    if eta_mode not in ETA_MODES:
        raise DataError(f"eta_mode must be one of {ETA_MODES}, got {eta_mode!r}")
    if not pairs:
        raise DataError("cannot assemble a sequence from zero frame pairs")
    pad_to = None
    if pad_timestamps and eta_mode != "off":
        pad_to = max(
            len(substrate.vocab.tokenize(format_timestamp(p.interval))) for p in pairs
        )
    parts: List[TokenEmbeddingSequence] = []
    for pair in pairs:
        frames = torch.as_tensor(pair.frames, dtype=DTYPE)
        parts.append(substrate.patch_embed(frames, pair.index))
        if eta_mode != "off":
            parts.append(
                embed_timestamp(substrate, pair.interval, pair.index, eta_mode, pad_to)
            )
    query_ids = substrate.vocab.tokenize(query)
    if not query_ids:
        raise DataError("empty query")
    parts.append(text_sequence(substrate, query_ids, start_index=len(pairs)))
    return TokenEmbeddingSequence.concat(parts)
