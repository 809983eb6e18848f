"""Seeded synthetic data: Gaussian-cluster face stand-ins and feature blocks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from cerkit.dataset import ManifestRecord, write_manifest
from cerkit.taxonomy import NUM_BASIC, NUM_COMPOUND, BasicExpression, CompoundExpression, constituents

TOY_ENCODERS = "toy-mlp(dim=64, seed=1, resolution=16, hidden=128), toy-mlp(dim=64, seed=2, resolution=16, hidden=128)"

TOY_CONFIG = f"""\
# synthetic fixture: toy encoders, default optimizer settings (Adam, peak lr 5e-5, batch 128)
epochs = 20
batch_size = 128
peak_lr = 5e-5
warmup_steps = 10
seed = 0
lambda_basic = 1.0
lambda_cl = 0.1
temperature = 0.07
combine_alpha = 1.0
encoders = {TOY_ENCODERS}
hidden_dims = 512
schedule = constant
"""


def basic_templates(resolution: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(NUM_BASIC, resolution, resolution, 3))


def compound_template(templates: np.ndarray, c: int) -> np.ndarray:
    mod, head = constituents(c)
    return 0.5 * (templates[mod] + templates[head])


def _save(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def make_image_fixture(
    out_dir: str | Path,
    n_train_per_class: int = 100,
    n_val_per_class: int = 20,
    n_basic_per_class: int = 0,
    resolution: int = 16,
    noise: float = 0.08,
    seed: int = 0,
) -> Path:
    """Write PNGs, ``manifest.tsv`` and ``train.cfg``; returns the manifest path.

    Each basic class has a random pixel template; a compound image is the
    mean of its two constituents' templates plus Gaussian pixel noise.
    Defaults give 700 train / 140 val compound-labelled images.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = basic_templates(resolution, rng)
    records = []

    def emit(kind: str, cls: int, split: str, k: int, mean: np.ndarray) -> None:
        path = img_dir / f"{split}_{kind}{cls}_{k:04d}.png"
        _save(mean + rng.normal(0.0, noise, size=mean.shape), path)
        records.append(ManifestRecord(str(path), "synthetic", kind, cls, split))

    for split, n in (("train", n_train_per_class), ("val", n_val_per_class)):
        for c in CompoundExpression:
            for k in range(n):
                emit("compound", int(c), split, k, compound_template(templates, c))
    for b in BasicExpression:
        for k in range(n_basic_per_class):
            emit("basic", int(b), "train", k, templates[b])
    manifest = out / "manifest.tsv"
    write_manifest(records, manifest)
    (out / "train.cfg").write_text(TOY_CONFIG, encoding="utf-8")
    return manifest


def gaussian_feature_blocks(
    n_per_class: int,
    block_dims: tuple[int, ...] = (8, 8),
    separation: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
    sample_seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-clustered features split into independent informative blocks.

    Each block has its own class means (scaled to ``separation``) and its
    own noise, so every block alone is a weaker but complementary view of
    the label. ``seed`` fixes the class means, ``sample_seed`` the draws, so
    train and validation sets share clusters. Returns
    ``(features, labels, block_edges)``.
    """
    means_rng = np.random.default_rng(seed)
    means = [means_rng.normal(0.0, separation, size=(NUM_COMPOUND, d)) for d in block_dims]
    rng = np.random.default_rng(seed if sample_seed is None else sample_seed)
    labels = np.repeat(np.arange(NUM_COMPOUND), n_per_class)
    rng.shuffle(labels)
    blocks = [m[labels] + rng.normal(0.0, noise, size=(labels.size, m.shape[1])) for m in means]
    edges = np.cumsum((0, *block_dims))
    return np.concatenate(blocks, axis=1).astype(np.float32), labels, edges
