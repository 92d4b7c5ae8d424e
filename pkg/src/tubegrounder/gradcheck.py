"""Central finite-difference verification of autograd gradients.

The loss closure must be deterministic (re-evaluating it with unchanged
parameters returns the same scalar); any sampling inside must be driven by a
reseeded generator. Run models in float64 when checking, otherwise the
difference quotient drowns in rounding noise.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Tuple

import torch

from .errors import NumericError

# Denominator floor: coordinates where both sides are this small count as
# matching rather than producing 0/0 noise.
_REL_FLOOR = 1e-8


@dataclass
class CoordCheck:
    param: str
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    checks: List[CoordCheck] = field(default_factory=list)
    frozen: List[str] = field(default_factory=list)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol

    @property
    def worst(self) -> CoordCheck | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.rel_err)


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[Tuple[str, torch.Tensor]],
    n_coords: int = 20,
    step: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    Samples up to ``n_coords`` coordinates per trainable parameter. Frozen
    parameters (requires_grad=False) are listed in the report with an implied
    zero analytic gradient and are not perturbed.
    """
    named = list(params)
    trainable = [(n, p) for n, p in named if p.requires_grad]
    frozen = [n for n, p in named if not p.requires_grad]

    for _, p in trainable:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"gradcheck loss is non-finite: {loss.item()}")
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in trainable
    }

    rng = random.Random(seed)
    checks: List[CoordCheck] = []
    for name, p in trainable:
        numel = p.numel()
        indices = rng.sample(range(numel), min(n_coords, numel))
        flat = p.data.view(-1)
        for idx in indices:
            saved = flat[idx].item()
            with torch.no_grad():
                flat[idx] = saved + step
                plus = loss_fn().item()
                flat[idx] = saved - step
                minus = loss_fn().item()
                flat[idx] = saved
            numeric = (plus - minus) / (2.0 * step)
            analytic = grads[name].view(-1)[idx].item()
            denom = max(abs(analytic), abs(numeric), _REL_FLOOR)
            rel = abs(analytic - numeric) / denom
            if abs(analytic) < _REL_FLOOR and abs(numeric) < _REL_FLOOR:
                rel = 0.0
            checks.append(CoordCheck(name, idx, analytic, numeric, rel))

    max_rel = max((c.rel_err for c in checks), default=0.0)
    return GradCheckReport(max_rel_err=max_rel, checks=checks, frozen=frozen)
