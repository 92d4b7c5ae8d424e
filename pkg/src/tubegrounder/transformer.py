"""Toy multimodal causal transformer over interleaved visual and text tokens.

Every token carries a 3-axis position (temporal index, x, y). Visual patch
tokens sit on the image grid, timestamp text sits at virtual coordinates just
outside it, and plain text walks along the temporal axis. Positions are
encoded with a parameter-free sinusoid per axis, so the model runs at any
sequence length without learned position tables.

Everything is float64 on CPU; the scale is small enough that double precision
is free and it keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

DTYPE = torch.float64

ROLE_VISUAL = "visual"
ROLE_TIMESTAMP = "timestamp"
ROLE_TEXT = "text"
ROLE_DET = "det"
ROLE_BRIDGE = "bridge"

DET_TOKEN = "[DET]"
END_TOKEN = "<eoa>"


@dataclass
class ModelConfig:
    """Hyperparameters for the substrate and the spatial decoder head."""

    dim: int = 48
    n_layers: int = 4
    n_heads: int = 4
    grid: Tuple[int, int] = (8, 8)
    feature_dim: int = 32
    n_signatures: int = 8
    bridge_queries: int = 8  # M
    encoder_layers: int = 6  # image encoder depth n
    decoder_layers: int = 2  # spatial decoder depth
    top_k: int = 8  # candidates per encoder layer
    dn_groups: int = 3
    dn_noise: float = 0.4
    max_answer_tokens: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim % 6 != 0:
            raise DataError(f"dim must be divisible by 6 (3 axes x sin/cos), got {self.dim}")
        if self.dim % self.n_heads != 0:
            raise DataError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if min(self.grid) < 1 or self.feature_dim < 1:
            raise DataError("grid and feature_dim must be positive")
        if self.bridge_queries < 0 or self.top_k < 1:
            raise DataError("bridge_queries must be >= 0 and top_k >= 1")


class Vocabulary:
    """Greedy longest-match tokenizer over a small fixed token list."""

    def __init__(self, n_signatures: int):
        specials = [DET_TOKEN, END_TOKEN]
        words = ["find"] + [f"sig_{i}" for i in range(n_signatures)]
        chars = [str(d) for d in range(10)] + [".", "-", " "]
        self.tokens: List[str] = specials + words + chars
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self._by_length = sorted(self.tokens, key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def det_id(self) -> int:
        return self.index[DET_TOKEN]

    @property
    def end_id(self) -> int:
        return self.index[END_TOKEN]

    def tokenize(self, text: str) -> List[int]:
        ids: List[int] = []
        pos = 0
        while pos < len(text):
            for tok in self._by_length:
                if text.startswith(tok, pos):
                    ids.append(self.index[tok])
                    pos += len(tok)
                    break
            else:
                raise DataError(
                    f"cannot tokenize at position {pos}: {text[pos : pos + 8]!r}"
                )
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for pos, i in enumerate(ids):
            if not 0 <= i < len(self.tokens):
                raise DataError(f"token id {i} out of range at position {pos}")
            out.append(self.tokens[i])
        return "".join(out)


def pos_embed(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of [T, 3] positions into [T, dim], dim % 6 == 0.

    Each axis gets dim/3 channels of interleaved sin/cos at geometrically
    spaced frequencies. Parameter-free, injective on the coordinate ranges we
    use (checked exhaustively in tests), and happy with fractional or virtual
    coordinates.
    """
    if dim % 6 != 0:
        raise DataError(f"pos_embed dim must be divisible by 6, got {dim}")
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DataError(f"positions must be [T, 3], got {tuple(positions.shape)}")
    axis_dim = dim // 3
    half = axis_dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=DTYPE, device=positions.device)
        * 2.0
        / axis_dim
    )
    angles = positions.to(DTYPE).unsqueeze(-1) * freqs  # [T, 3, half]
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # [T, 3, half, 2]
    return enc.reshape(positions.shape[0], dim)


@dataclass
class TokenEmbeddingSequence:
    """A run of token embeddings with per-token positions and role tags."""

    embeddings: torch.Tensor  # [T, D]
    positions: torch.Tensor  # [T, 3]
    roles: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        t = self.embeddings.shape[0]
        if self.positions.shape != (t, 3) or len(self.roles) != t:
            raise DataError(
                f"sequence pieces disagree: emb {tuple(self.embeddings.shape)}, "
                f"pos {tuple(self.positions.shape)}, roles {len(self.roles)}"
            )

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def max_temporal_index(self) -> int:
        if len(self) == 0:
            return -1
        return int(self.positions[:, 0].max().item())

    @staticmethod
    def concat(parts: Sequence["TokenEmbeddingSequence"]) -> "TokenEmbeddingSequence":
        return TokenEmbeddingSequence(
            embeddings=torch.cat([p.embeddings for p in parts]),
            positions=torch.cat([p.positions for p in parts]),
            roles=[r for p in parts for r in p.roles],
        )


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.c_attn = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.c_proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, d = x.shape
        hs = d // self.n_heads
        q, k, v = self.c_attn(x).split(d, dim=1)
        q = q.view(t, self.n_heads, hs).transpose(0, 1)
        k = k.view(t, self.n_heads, hs).transpose(0, 1)
        v = v.view(t, self.n_heads, hs).transpose(0, 1)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.c_proj(y.transpose(0, 1).reshape(t, d))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = CausalSelfAttention(dim, n_heads)
        self.ln_2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Normal(0, 0.02) weights, zero biases, drawn from an explicit generator."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, 0.02, generator=generator)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Embedding):
            m.weight.data.normal_(0.0, 0.02, generator=generator)


class Substrate(nn.Module):
    """Pre-norm causal transformer consuming a TokenEmbeddingSequence."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(config.n_signatures)
        self.tok_emb = nn.Embedding(len(self.vocab), config.dim, dtype=DTYPE)
        self.pair_proj = nn.Linear(2 * config.feature_dim, config.dim, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            Block(config.dim, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.dim, dtype=DTYPE)
        self.head = nn.Linear(config.dim, len(self.vocab), bias=False, dtype=DTYPE)

    def embed_tokens(self, ids: Sequence[int]) -> torch.Tensor:
        return self.tok_emb(torch.as_tensor(list(ids), dtype=torch.long))

    def patch_embed(self, frame_pair: torch.Tensor, pair_index: int) -> TokenEmbeddingSequence:
        """Embed a consecutive-frame pair [2, H, W, feature_dim] as grid tokens.

        Token (r, c) gets position (pair_index, x=c, y=r), row-major order.
        """
        h, w = self.config.grid
        if frame_pair.shape != (2, h, w, self.config.feature_dim):
            raise DataError(
                f"frame pair shape {tuple(frame_pair.shape)}, "
                f"want (2, {h}, {w}, {self.config.feature_dim})"
            )
        stacked = torch.cat([frame_pair[0], frame_pair[1]], dim=-1)  # [H, W, 2*Dv]
        emb = self.pair_proj(stacked.reshape(h * w, 2 * self.config.feature_dim).to(DTYPE))
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
        )
        positions = torch.stack(
            [torch.full((h * w,), float(pair_index), dtype=DTYPE), xs.reshape(-1), ys.reshape(-1)],
            dim=1,
        )
        return TokenEmbeddingSequence(emb, positions, [ROLE_VISUAL] * (h * w))

    def forward(self, seq: TokenEmbeddingSequence) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run the causal stack; returns (hidden [T, D], logits [T, V]).

        Hidden states are read after the final layer norm; the same tensor
        feeds the vocabulary head.
        """
        if len(seq) == 0:
            raise DataError("cannot run the substrate on an empty sequence")
        x = seq.embeddings.to(DTYPE) + pos_embed(seq.positions, self.config.dim)
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        return hidden, self.head(hidden)
