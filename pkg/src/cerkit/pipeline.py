"""Wires manifests, encoders and augmentation into fused feature tensors."""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from cerkit.dataset import AugmentationConfig, DecodeError, ManifestRecord, augment_pair, load_image, preprocess
from cerkit.encoders import (
    Encoder,
    FeatureBatch,
    build_encoder,
    read_feature_cache,
    split_encoder_list,
    write_feature_cache,
)
from cerkit.errors import ShapeMismatch
from cerkit.fusion import FusionConfig, concat_features
from cerkit.trainer import FeatureData, TrainConfig

log = logging.getLogger(__name__)


def build_encoders(spec: str | Sequence[str]) -> list[Encoder]:
    names = split_encoder_list(spec) if isinstance(spec, str) else list(spec)
    encoders = [build_encoder(n) for n in names]
    if len({e.resolution for e in encoders}) > 1:
        raise ShapeMismatch("all encoders must share one input resolution")
    return encoders


def fusion_config_for(encoders: Sequence[Encoder], cfg: TrainConfig) -> FusionConfig:
    return FusionConfig(
        encoder_names=[e.label for e in encoders],
        encoder_dims=[e.spec.output_dim for e in encoders],
        hidden_dims=list(cfg.hidden_dims),
        combine_alpha=cfg.combine_alpha,
    )


def augmentation_for(encoders: Sequence[Encoder], base: AugmentationConfig | None = None) -> AugmentationConfig:
    from dataclasses import replace

    return replace(base or AugmentationConfig(), resolution=encoders[0].resolution)


def encode_arrays(encoders: Sequence[Encoder], images: Sequence[np.ndarray], batch_size: int = 256) -> torch.Tensor:
    """Encode ``H x W x 3`` float arrays with every encoder and concatenate."""
    chunks = []
    names = [e.label for e in encoders]
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[start : start + batch_size])).permute(0, 3, 1, 2).contiguous()
        fused = concat_features([e.encode_batch(x) for e in encoders], names)
        chunks.append(fused.features.float())
    if not chunks:
        return torch.zeros((0, sum(e.spec.output_dim for e in encoders)))
    return torch.cat(chunks)


def view_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _cache_path(cache_dir: Path, encoder: Encoder, paths: Sequence[str]) -> Path:
    digest = hashlib.sha1("\n".join(paths).encode("utf-8")).hexdigest()[:12]
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in encoder.label)
    return cache_dir / f"{safe}__{digest}.cerf"


def original_features(
    records: Sequence[ManifestRecord],
    encoders: Sequence[Encoder],
    aug: AugmentationConfig,
    cache_dir: str | Path | None = None,
) -> torch.Tensor:
    """Fused features of the un-augmented images, optionally through a ``CERF`` cache per encoder."""
    paths = [r.image_path for r in records]
    if cache_dir is None:
        return encode_arrays(encoders, [preprocess(load_image(p), aug) for p in paths])
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    parts = []
    images = None
    for enc in encoders:
        cp = _cache_path(cache_dir, enc, paths)
        if cp.exists():
            fb = read_feature_cache(cp, enc.label)
        else:
            if images is None:
                images = [preprocess(load_image(p), aug) for p in paths]
            fb = FeatureBatch(encode_arrays([enc], images), enc.label)
            write_feature_cache(fb, cp)
            log.info("cached %d x %d features for %s at %s", fb.batch_size, fb.dim, enc.label, cp)
        parts.append(fb)
    return concat_features(parts, [e.label for e in encoders]).features


def feature_data(
    records: Sequence[ManifestRecord],
    encoders: Sequence[Encoder],
    aug: AugmentationConfig,
    seed: int,
    with_views: bool = True,
    cache_dir: str | Path | None = None,
) -> FeatureData:
    """Build a :class:`FeatureData`; augmented views are re-sampled every epoch."""
    feats = original_features(records, encoders, aug, cache_dir)
    basic = torch.tensor([r.basic_target for r in records], dtype=torch.long)
    compound = torch.tensor([r.compound_target for r in records], dtype=torch.long)
    views = None
    if with_views:
        decoded = [load_image(r.image_path) for r in records]

        def views(epoch: int) -> tuple[torch.Tensor, torch.Tensor]:
            pairs = [augment_pair(img, aug, view_seed(seed, epoch, i)) for i, img in enumerate(decoded)]
            return encode_arrays(encoders, [a for a, _ in pairs]), encode_arrays(encoders, [b for _, b in pairs])

    return FeatureData(feats, basic, compound, views)


def encode_paths_lenient(
    paths: Sequence[str], encoders: Sequence[Encoder], aug: AugmentationConfig
) -> tuple[torch.Tensor, list[bool]]:
    """Like :func:`original_features` but undecodable images yield a zero row and ``ok=False``."""
    images, ok = [], []
    blank = np.zeros((aug.resolution, aug.resolution, 3), dtype=np.float32)
    for p in paths:
        try:
            images.append(preprocess(load_image(p), aug))
            ok.append(True)
        except DecodeError as exc:
            log.warning("%s", exc)
            images.append(blank)
            ok.append(False)
    return encode_arrays(encoders, images), ok
