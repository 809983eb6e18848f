"""Manifests, source schema maps, split assignment and paired augmentation."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from cerkit.errors import DataError
from cerkit.taxonomy import BasicExpression, CompoundExpression, UnknownLabel, parse_label

MANIFEST_HEADER = ("path", "source", "kind", "label", "split")
LABEL_KINDS = ("basic", "compound")
SPLITS = ("train", "val", "test", "unlabeled")
UNASSIGNED = "-"

SCHEMA_DIR = Path(__file__).parent / "schemas"


class ManifestParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownSourceId(DataError):
    pass


class DecodeError(DataError):
    pass


@dataclass(frozen=True)
class SchemaMap:
    """Source-specific integer ids -> canonical class.

    ``mapping=None`` marks a canonical source whose ids already are the
    canonical indices of the record's label kind.
    """

    source: str
    mapping: Mapping[int, str] | None = None

    def __post_init__(self):
        if self.mapping is None:
            return
        resolved = [parse_label(name) for name in self.mapping.values()]
        keys = [(type(r).__name__, int(r)) for r in resolved]
        if len(set(keys)) != len(keys):
            raise DataError(f"schema for {self.source!r} maps two ids to the same class")

    def resolve(self, kind: str, label_id: int) -> BasicExpression | CompoundExpression:
        if self.mapping is None:
            enum = BasicExpression if kind == "basic" else CompoundExpression
            try:
                return enum(label_id)
            except ValueError:
                raise UnknownSourceId(f"{self.source}: no {kind} class with id {label_id}") from None
        if label_id not in self.mapping:
            raise UnknownSourceId(f"{self.source}: id {label_id} has no schema entry")
        label = parse_label(self.mapping[label_id])
        if _kind_of(label) != kind:
            raise UnknownSourceId(
                f"{self.source}: id {label_id} maps to {_kind_of(label)} class {label.display_name!r}, "
                f"record says {kind}"
            )
        return label


def _kind_of(label) -> str:
    return "basic" if isinstance(label, BasicExpression) else "compound"


def canonical_schema(source: str = "synthetic") -> SchemaMap:
    return SchemaMap(source, None)


def load_schema(path: str | Path, source: str | None = None) -> SchemaMap:
    """Read a ``source_id<TAB>canonical_name`` file; source defaults to the file stem."""
    path = Path(path)
    mapping: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestParseError(f"{path}: expected 2 tab-separated fields", lineno)
            try:
                sid = int(parts[0])
                parse_label(parts[1])
            except (ValueError, UnknownLabel) as exc:
                raise ManifestParseError(f"{path}: {exc}", lineno) from None
            if sid in mapping:
                raise ManifestParseError(f"{path}: duplicate id {sid}", lineno)
            mapping[sid] = parts[1]
    return SchemaMap(source or path.stem, mapping)


@functools.lru_cache(maxsize=1)
def _bundled_schemas() -> tuple[tuple[str, SchemaMap], ...]:
    schemas = {p.stem: load_schema(p) for p in sorted(SCHEMA_DIR.glob("*.tsv"))}
    for src in ("synthetic", "canonical"):
        schemas[src] = canonical_schema(src)
    return tuple(schemas.items())


def builtin_schemas() -> dict[str, SchemaMap]:
    return dict(_bundled_schemas())


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    source: str
    label_kind: str
    label_id: int
    split: str | None = None
    label: BasicExpression | CompoundExpression | None = field(default=None, compare=False)

    def __post_init__(self):
        # records built in code: resolve against the bundled schemas when possible
        if self.label is None:
            schema = builtin_schemas().get(self.source)
            if schema is not None:
                object.__setattr__(self, "label", schema.resolve(self.label_kind, self.label_id))

    @property
    def basic_target(self) -> int:
        return int(self.label) if self.label_kind == "basic" else -1

    @property
    def compound_target(self) -> int:
        return int(self.label) if self.label_kind == "compound" else -1


Schemas = SchemaMap | Mapping[str, SchemaMap]


def _schema_for(schema: Schemas, source: str, lineno: int) -> SchemaMap:
    if isinstance(schema, SchemaMap):
        return schema
    try:
        return schema[source]
    except KeyError:
        raise ManifestParseError(f"no schema map for source {source!r}", lineno) from None


def load_manifest(path: str | Path, schema: Schemas | None = None) -> list[ManifestRecord]:
    """Parse a manifest file, resolving every label to the canonical taxonomy."""
    schema = builtin_schemas() if schema is None else schema
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if tuple(header.split("\t")) != MANIFEST_HEADER:
            raise ManifestParseError(f"bad header {header!r}", 1)
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\r\n")
            if not line:
                raise ManifestParseError("empty line", lineno)
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_HEADER):
                raise ManifestParseError(f"expected {len(MANIFEST_HEADER)} fields, got {len(parts)}", lineno)
            img, source, kind, label_id, split = parts
            if kind not in LABEL_KINDS:
                raise ManifestParseError(f"label kind must be one of {LABEL_KINDS}, got {kind!r}", lineno)
            if split != UNASSIGNED and split not in SPLITS:
                raise ManifestParseError(f"unknown split {split!r}", lineno)
            try:
                lid = int(label_id)
            except ValueError:
                raise ManifestParseError(f"label id {label_id!r} is not an integer", lineno) from None
            sm = _schema_for(schema, source, lineno)
            label = sm.resolve(kind, lid)
            records.append(
                ManifestRecord(img, source, kind, lid, None if split == UNASSIGNED else split, label)
            )
    return records


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(MANIFEST_HEADER) + "\n")
        for r in records:
            fields = (r.image_path, r.source, r.label_kind, str(r.label_id), r.split or UNASSIGNED)
            if any("\t" in f or "\n" in f for f in fields):
                raise DataError(f"field contains a tab or newline: {fields!r}")
            fh.write("\t".join(fields) + "\n")


def split_manifest(
    records: Sequence[ManifestRecord], val_fraction: float, seed: int
) -> list[ManifestRecord]:
    """Assign train/val to records without a split.

    ``round(val_fraction * N)`` of the N unassigned records go to val, chosen
    by a seeded permutation; pre-assigned records are returned untouched.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    free = [i for i, r in enumerate(records) if r.split is None]
    n_val = int(math.floor(val_fraction * len(free) + 0.5))
    order = np.random.default_rng(seed).permutation(len(free))
    val_idx = {free[j] for j in order[:n_val]}
    out = []
    for i, r in enumerate(records):
        if r.split is None:
            r = replace(r, split="val" if i in val_idx else "train")
        out.append(r)
    return out


def split_counts(records: Iterable[ManifestRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        key = r.split or UNASSIGNED
        counts[key] = counts.get(key, 0) + 1
    return counts


# --------------------------------------------------------------------------
# images and augmentation


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an ``H x W x 3`` uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from None


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_TRANSFORMS = ("resized_crop", "hflip", "color_jitter", "normalize")


@dataclass(frozen=True)
class AugmentationConfig:
    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    resolution: int = 224
    hflip_p: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        unknown = set(self.transforms) - set(DEFAULT_TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")

    @classmethod
    def identity(cls, resolution: int = 224) -> "AugmentationConfig":
        return cls(transforms=(), resolution=resolution)


def _as_chw(image) -> torch.Tensor:
    if isinstance(image, (str, Path)):
        image = load_image(image)
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DecodeError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[1] == size and x.shape[2] == size:
        return x
    return F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]


def _resized_crop(x: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = x.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return x[:, top : top + ch, left : left + cw]
    return x


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None]


def _color_jitter(x: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    x = (x * b).clamp(0, 1)
    m = _grayscale(x).mean()
    x = ((x - m) * c + m).clamp(0, 1)
    g = _grayscale(x)
    return ((x - g) * s + g).clamp(0, 1)


def _normalize(x: torch.Tensor, cfg: AugmentationConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.mean, dtype=x.dtype)[:, None, None]
    std = torch.tensor(cfg.std, dtype=x.dtype)[:, None, None]
    return (x - mean) / std


def _augment(x: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    for name in cfg.transforms:
        if name == "resized_crop":
            x = _resized_crop(x, cfg, rng)
        elif name == "hflip":
            if rng.uniform() < cfg.hflip_p:
                x = x.flip(-1)
        elif name == "color_jitter":
            x = _color_jitter(x, cfg, rng)
    x = _resize(x, cfg.resolution)
    if "normalize" in cfg.transforms:
        x = _normalize(x, cfg)
    return x.permute(1, 2, 0).contiguous().numpy()


def preprocess(image, cfg: AugmentationConfig) -> np.ndarray:
    """Deterministic view of the original image: resize (+ normalize if configured)."""
    x = _resize(_as_chw(image), cfg.resolution)
    if "normalize" in cfg.transforms:
        x = _normalize(x, cfg)
    return x.permute(1, 2, 0).contiguous().numpy()


def augment_pair(image, config: AugmentationConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independently sampled augmentations of one image.

    ``image`` is an ``H x W x 3`` array (uint8 or float in [0, 1]) or a path.
    Each view draws from its own child stream of ``seed``, so the pair is
    reproducible and safe to compute from concurrent workers.
    """
    x = _as_chw(image)
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    return (
        _augment(x, config, np.random.default_rng(s1)),
        _augment(x, config, np.random.default_rng(s2)),
    )
