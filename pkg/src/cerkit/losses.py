"""Training objectives: floored cross-entropy, NT-Xent and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from cerkit.errors import DataError, InvalidDistribution, LabelOutOfRange

PROB_FLOOR = 1e-12


class BatchTooSmall(DataError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_basic: float = 1.0
    lambda_cl: float = 0.1
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        for w in (self.lambda_basic, self.lambda_cl):
            if not math.isfinite(w) or w < 0:
                raise ValueError("loss weights must be finite and >= 0")


def cross_entropy(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log(p[i, y_i] + 1e-12)`` over the batch."""
    probs = torch.as_tensor(probs)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ValueError("probs must be B x K and targets length B")
    with torch.no_grad():
        if (probs < 0).any() or ((probs.sum(dim=1) - 1).abs() > 1e-6).any():
            raise InvalidDistribution("rows of probs must be distributions")
        if ((targets < 0) | (targets >= probs.shape[1])).any():
            raise LabelOutOfRange(f"targets must lie in [0, {probs.shape[1]})")
    picked = probs.gather(1, targets[:, None]).squeeze(1)
    return -torch.log(picked + PROB_FLOOR).mean()


def contrastive_nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """NT-Xent over ``2B`` views; each view's positive is its pair, the other ``2B-2`` are negatives."""
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError("z1 and z2 must both be B x d")
    b = z1.shape[0]
    if b < 2:
        raise BatchTooSmall("contrastive loss needs at least two pairs")
    z = F.normalize(torch.cat([z1, z2], dim=0), dim=1)
    sim = z @ z.T / temperature
    eye = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(sim, pos)


def total_loss(l_ce, l_basic, l_cl, weights: LossWeights = LossWeights()):
    return l_ce + weights.lambda_basic * l_basic + weights.lambda_cl * l_cl
