"""Feature concatenation, dual-head MLP and basic -> compound head combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from cerkit.encoders import FeatureBatch
from cerkit.errors import ShapeMismatch
from cerkit.taxonomy import COMPOUND_BASIC_MAP, NUM_BASIC, NUM_COMPOUND

PROB_FLOOR = 1e-12


class BatchSizeMismatch(ShapeMismatch):
    pass


class EncoderOrderMismatch(ShapeMismatch):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


@dataclass
class FusionConfig:
    encoder_names: list[str]
    encoder_dims: list[int]
    hidden_dims: list[int] = field(default_factory=lambda: [512])
    dropout: float = 0.1
    combine_alpha: float = 1.0
    basic_classes: int = NUM_BASIC
    compound_classes: int = NUM_COMPOUND

    def __post_init__(self):
        if len(self.encoder_names) != len(self.encoder_dims) or not self.encoder_names:
            raise ValueError("need one dim per encoder and at least one encoder")
        if self.combine_alpha < 0:
            raise ValueError("combine_alpha must be >= 0")
        if self.basic_classes != NUM_BASIC or self.compound_classes != NUM_COMPOUND:
            raise ValueError("heads are fixed at 7 basic and 7 compound classes")

    @property
    def fused_dim(self) -> int:
        return sum(self.encoder_dims)

    @property
    def embed_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.fused_dim


@dataclass
class ModelOutput:
    basic_logits: torch.Tensor
    compound_logits: torch.Tensor
    basic_probs: torch.Tensor
    compound_probs: torch.Tensor
    combined_probs: torch.Tensor
    embedding: torch.Tensor | None = None


def concat_features(
    features: Sequence[FeatureBatch], encoder_names: Sequence[str] | None = None
) -> FeatureBatch:
    """Concatenate per-encoder features column-wise, in encoder order."""
    if not features:
        raise ValueError("nothing to concatenate")
    if encoder_names is not None and [f.encoder_name for f in features] != list(encoder_names):
        raise EncoderOrderMismatch(
            f"got encoders {[f.encoder_name for f in features]}, expected {list(encoder_names)}"
        )
    sizes = {f.batch_size for f in features}
    if len(sizes) != 1:
        raise BatchSizeMismatch(f"batch sizes differ: {sorted(sizes)}")
    if len(features) == 1:
        return features[0]
    return FeatureBatch(
        torch.cat([f.features for f in features], dim=1), "+".join(f.encoder_name for f in features)
    )


def split_features(fused: torch.Tensor, dims: Sequence[int]) -> list[torch.Tensor]:
    return list(torch.split(fused, list(dims), dim=1))


def combine_heads(
    basic_logits: torch.Tensor,
    compound_logits: torch.Tensor,
    compound_map=COMPOUND_BASIC_MAP,
    alpha: float = 1.0,
) -> torch.Tensor:
    """Add ``alpha * log(M p_basic)`` to the compound logits and renormalize.

    With ``alpha == 0`` the compound head passes through unchanged.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if basic_logits.shape[0] != compound_logits.shape[0]:
        raise BatchSizeMismatch("basic and compound logits disagree on batch size")
    if not isinstance(compound_map, torch.Tensor):
        compound_map = torch.tensor(np.asarray(compound_map))
    m = compound_map.to(dtype=basic_logits.dtype, device=basic_logits.device)
    if basic_logits.shape[1] != m.shape[1] or compound_logits.shape[1] != m.shape[0]:
        raise DimensionMismatch("logit widths do not match the compound map")
    if alpha == 0:
        return torch.softmax(compound_logits, dim=1)
    prior = torch.softmax(basic_logits, dim=1) @ m.T
    return torch.softmax(compound_logits + alpha * torch.log(prior + PROB_FLOOR), dim=1)


class FusionModel(nn.Module):
    """Shared trunk MLP over fused features with basic and compound heads."""

    def __init__(self, config: FusionConfig, seed: int = 0):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        width = config.fused_dim
        for h in config.hidden_dims:
            layers += [nn.Linear(width, h), nn.GELU(), nn.Dropout(config.dropout)]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.basic_head = nn.Linear(width, config.basic_classes)
        self.compound_head = nn.Linear(width, config.compound_classes)
        self.register_buffer("compound_map", torch.tensor(COMPOUND_BASIC_MAP, dtype=torch.float32))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / mod.in_features**0.5
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=g, dtype=mod.weight.dtype) * 2 * bound - bound)
                    mod.bias.zero_()

    def embed(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.ndim != 2 or fused.shape[1] != self.config.fused_dim:
            raise DimensionMismatch(f"expected width {self.config.fused_dim}, got {tuple(fused.shape)}")
        return self.trunk(fused)

    def forward(self, fused: torch.Tensor | FeatureBatch) -> ModelOutput:
        if isinstance(fused, FeatureBatch):
            fused = fused.features
        fused = fused.to(self.basic_head.weight.dtype)
        h = self.embed(fused)
        basic_logits = self.basic_head(h)
        compound_logits = self.compound_head(h)
        return ModelOutput(
            basic_logits=basic_logits,
            compound_logits=compound_logits,
            basic_probs=torch.softmax(basic_logits, dim=1),
            compound_probs=torch.softmax(compound_logits, dim=1),
            combined_probs=combine_heads(
                basic_logits, compound_logits, self.compound_map.to(basic_logits.dtype), self.config.combine_alpha
            ),
            embedding=h,
        )
