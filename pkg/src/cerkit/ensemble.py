"""Late fusion: weighted averaging of member probability matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cerkit.encoders import CacheFormatError, read_feature_cache, write_feature_cache
from cerkit.errors import ShapeMismatch
from cerkit.taxonomy import NUM_COMPOUND, check_distribution


class AllZeroWeights(ValueError):
    pass


@dataclass
class EnsembleConfig:
    member_names: list[str]
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights:
            self.weights = [1.0] * len(self.member_names)
        if len(self.weights) != len(self.member_names):
            raise ValueError("need one weight per member")

    @property
    def normalized_weights(self) -> np.ndarray:
        return normalize_weights(self.weights)


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and >= 0")
    if w.sum() == 0:
        raise AllZeroWeights("at least one ensemble weight must be positive")
    return w / w.sum()


def fuse_probs(prob_list: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted arithmetic mean of row-stochastic matrices (weights normalized to sum 1)."""
    if not prob_list:
        raise ValueError("need at least one ensemble member")
    mats = [check_distribution(np.asarray(p, dtype=np.float64)) for p in prob_list]
    if any(m.shape != mats[0].shape or m.ndim != 2 for m in mats):
        raise ShapeMismatch(f"member shapes differ: {[m.shape for m in mats]}")
    w = normalize_weights([1.0] * len(mats) if weights is None else weights)
    if w.size != len(mats):
        raise ValueError("need one weight per member")
    if len(mats) == 1:
        return mats[0].copy()
    out = np.zeros_like(mats[0])
    for wi, m in zip(w, mats):
        out += wi * m
    return out


def predict(fused: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(fused), axis=1)


def write_prob_file(probs: np.ndarray, path: str | Path) -> None:
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != NUM_COMPOUND:
        raise ShapeMismatch(f"probability files hold B x {NUM_COMPOUND} matrices")
    write_feature_cache(probs.astype(np.float32), path)


def read_prob_file(path: str | Path) -> np.ndarray:
    """Read a ``CERF`` file with D=7, renormalizing rows to absorb float32 rounding."""
    fb = read_feature_cache(path)
    if fb.dim != NUM_COMPOUND:
        raise CacheFormatError(f"{path}: expected D={NUM_COMPOUND} probabilities, found D={fb.dim}")
    p = fb.features.numpy().astype(np.float64)
    return p / p.sum(axis=1, keepdims=True)
