"""Bridging queries: a learned bundle of tokens that rides behind the answer.

After the temporal answer and its [DET] transition token, M learnable query
embeddings are appended to the sequence. Causal attention lets them absorb
the full multimodal context (they see everything, nothing sees them), and
their last-layer hidden states, passed through a small MLP, become the
conditioning signal for the spatial decoder. Training the substrate end to
end through this path is the point: no stop-gradient anywhere.
"""

from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn as nn

from .errors import DataError
from .transformer import (
    DTYPE,
    ModelConfig,
    ROLE_BRIDGE,
    ROLE_DET,
    ROLE_TEXT,
    Substrate,
    TokenEmbeddingSequence,
)

Q_INIT_STD = 0.02


class BridgingState(nn.Module):
    """Learnable bridge queries plus their projection MLP.

    ``frozen_queries`` is a non-trainable stand-in of the same shape, used by
    the ablation that removes semantic bridging while keeping tensor shapes.
    """

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        m, d = config.bridge_queries, config.dim
        q = torch.empty(m, d, dtype=DTYPE)
        if m > 0:
            q.normal_(0.0, Q_INIT_STD, generator=generator)
        self.q_init = nn.Parameter(q)
        self.mlp = nn.Sequential(
            nn.Linear(d, d, dtype=DTYPE), nn.GELU(), nn.Linear(d, d, dtype=DTYPE)
        )
        self.reset_projection()
        frozen = torch.empty(m, d, dtype=DTYPE)
        if m > 0:
            frozen.normal_(0.0, 1.0, generator=generator)
        self.register_buffer("frozen_queries", frozen)

    def reset_projection(self) -> None:
        """Start the projection as a direction-preserving map.

        Identity into the GELU and doubled identity out of it (2*gelu(x)
        tracks x around the origin), zero biases. An untrained projection
        then passes hidden-state geometry through roughly unchanged instead
        of scrambling it behind a random rotation, which matters because the
        output conditions candidate selection from the first step.
        """
        first, last = self.mlp[0], self.mlp[2]
        with torch.no_grad():
            first.weight.copy_(torch.eye(first.weight.shape[0], dtype=DTYPE))
            first.bias.zero_()
            last.weight.copy_(2.0 * torch.eye(last.weight.shape[0], dtype=DTYPE))
            last.bias.zero_()


def extend_with_det_and_queries(
    substrate: Substrate,
    state: BridgingState,
    seq: TokenEmbeddingSequence,
    answer_ids: Sequence[int],
    include_queries: bool = True,
) -> TokenEmbeddingSequence:
    """Append answer text (ending in [DET]) and then the bridge queries.

    Answer tokens continue along the temporal axis; the M bridge queries sit
    at (i_max + 1, 0, m) for m = 1..M, one step past the last text token.
    ``include_queries=False`` appends the answer only, for the ablation that
    replaces learned bridging with frozen random conditioning.
    """
    if not answer_ids:
        raise DataError("answer is empty; expected timestamps ending in [DET]")
    if answer_ids[-1] != substrate.vocab.det_id:
        raise DataError("answer does not end with the [DET] transition token")
    start = seq.max_temporal_index + 1
    emb = substrate.embed_tokens(answer_ids)
    pos = torch.tensor(
        [[float(start + j), 0.0, 0.0] for j in range(len(answer_ids))], dtype=DTYPE
    )
    roles = [ROLE_TEXT] * (len(answer_ids) - 1) + [ROLE_DET]
    answer = TokenEmbeddingSequence(emb, pos, roles)

    m = state.q_init.shape[0]
    if m == 0 or not include_queries:
        return TokenEmbeddingSequence.concat([seq, answer])
    i_max = start + len(answer_ids) - 1
    bridge_pos = torch.tensor(
        [[float(i_max + 1), 0.0, float(j)] for j in range(1, m + 1)], dtype=DTYPE
    )
    bridge = TokenEmbeddingSequence(state.q_init, bridge_pos, [ROLE_BRIDGE] * m)
    return TokenEmbeddingSequence.concat([seq, answer, bridge])


def extract_bridging(
    state: BridgingState, hidden: torch.Tensor, roles: List[str]
) -> torch.Tensor:
    """Project the bridge rows of the last-layer hidden states: [M, D].

    With M = 0 this returns an empty [0, D] tensor; downstream conditioning
    must tolerate the absence.
    """
    idx = [i for i, r in enumerate(roles) if r == ROLE_BRIDGE]
    m = state.q_init.shape[0]
    if len(idx) != m:
        raise DataError(f"found {len(idx)} bridge rows in the sequence, expected {m}")
    if m == 0:
        return torch.zeros(0, hidden.shape[1], dtype=hidden.dtype)
    return state.mlp(hidden[idx])
