"""Named feature extractors and the binary ``CERF`` feature cache."""

from __future__ import annotations

import ast
import re
import struct
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
from torch import nn

from cerkit.errors import DataError, ShapeMismatch


class DuplicateEncoder(ValueError):
    pass


class UnknownEncoder(KeyError):
    pass


class WeightsNotLoaded(RuntimeError):
    pass


class CacheFormatError(DataError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    output_dim: int
    weights_source: str | None = None
    trainable: bool = False

    def __post_init__(self):
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")


@dataclass
class FeatureBatch:
    features: torch.Tensor
    encoder_name: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeMismatch(f"features must be B x D, got {tuple(self.features.shape)}")

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class Encoder:
    """An encoder instance: a spec, an expected input resolution and a module."""

    def __init__(self, spec: EncoderSpec, module: nn.Module | None, resolution: int = 224, label: str | None = None):
        self.spec = spec
        self.module = module
        self.resolution = resolution
        self.label = label or spec.name
        self._checked = False
        if module is not None:
            module.eval()

    def encode_batch(self, batch: torch.Tensor) -> FeatureBatch:
        """Encode a ``B x 3 x H x W`` image batch into a ``B x D`` feature batch."""
        if self.module is None:
            raise WeightsNotLoaded(f"encoder {self.spec.name!r} needs weights (weights_source is unset)")
        x = torch.as_tensor(batch)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[0] < 1:
            raise ShapeMismatch(f"expected a B x 3 x H x W batch, got {tuple(x.shape)}")
        if x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ShapeMismatch(
                f"{self.label} expects {self.resolution}x{self.resolution} input, got {x.shape[2]}x{x.shape[3]}"
            )
        if not torch.isfinite(x).all():
            raise DataError("image batch contains non-finite values")
        param = next(iter(self.module.parameters()), None)
        if param is not None:
            x = x.to(param.dtype)
        with torch.no_grad():
            out = self.module(x)
        if out.ndim != 2 or out.shape[1] != self.spec.output_dim:
            raise ShapeMismatch(
                f"{self.label} declared output_dim={self.spec.output_dim} but produced shape {tuple(out.shape)}"
            )
        self._checked = True
        return FeatureBatch(out, self.label)


class ToyMLP(nn.Module):
    """Two dense layers over flattened pixels; stands in for a real backbone."""

    def __init__(self, resolution: int, dim: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        n_in = 3 * resolution * resolution
        g = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(n_in, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = 1.0 / layer.in_features**0.5
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=g) * 2 * bound - bound)
                layer.bias.copy_(torch.rand(layer.bias.shape, generator=g) * 2 * bound - bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


Builder = Callable[..., Encoder]

_REGISTRY: dict[str, tuple[EncoderSpec, Builder]] = {}
_LOCK = threading.Lock()


def register_encoder(spec: EncoderSpec, builder: Builder) -> EncoderSpec:
    with _LOCK:
        if spec.name in _REGISTRY:
            raise DuplicateEncoder(spec.name)
        _REGISTRY[spec.name] = (spec, builder)
    return spec


def registered_encoders() -> dict[str, EncoderSpec]:
    return {name: spec for name, (spec, _) in _REGISTRY.items()}


def get_encoder_spec(name: str) -> EncoderSpec:
    try:
        return _REGISTRY[name][0]
    except KeyError:
        raise UnknownEncoder(name) from None


def parse_encoder_string(text: str) -> tuple[str, dict]:
    """``"toy-mlp(dim=8, seed=1)"`` -> ``("toy-mlp", {"dim": 8, "seed": 1})``."""
    m = re.fullmatch(r"\s*([\w.\-]+)\s*(?:\((.*)\))?\s*", text)
    if not m:
        raise ValueError(f"bad encoder string {text!r}")
    kwargs: dict = {}
    if m.group(2):
        for item in m.group(2).split(","):
            if not item.strip():
                continue
            key, _, value = item.partition("=")
            value = value.strip()
            try:
                kwargs[key.strip()] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                kwargs[key.strip()] = value
    return m.group(1), kwargs


def split_encoder_list(text: str) -> list[str]:
    """Split a comma-separated encoder list, respecting parentheses."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def build_encoder(text: str) -> Encoder:
    name, kwargs = parse_encoder_string(text)
    try:
        _, builder = _REGISTRY[name]
    except KeyError:
        raise UnknownEncoder(name) from None
    enc = builder(**kwargs)
    enc.label = text.strip()
    return enc


def _build_toy(dim: int = 8, seed: int = 0, resolution: int = 16, hidden: int = 64) -> Encoder:
    spec = EncoderSpec("toy-mlp", int(dim))
    return Encoder(spec, ToyMLP(int(resolution), int(dim), int(hidden), int(seed)), int(resolution))


def _jit_load(path: str) -> nn.Module | None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        try:
            return torch.jit.load(path, map_location="cpu")
        except (RuntimeError, ValueError):
            return None


def _load_module(path: str) -> nn.Module:
    """A TorchScript archive, or a pickled ``nn.Module``."""
    module = _jit_load(path)
    if module is not None:
        return module
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(obj, nn.Module):
        raise WeightsNotLoaded(f"{path} holds a {type(obj).__name__}, expected a module")
    return obj


def _resnet_builder(arch: str, dim: int) -> Builder:
    def build(weights: str | None = None, resolution: int = 224) -> Encoder:
        spec = EncoderSpec(arch, dim, weights)
        if weights is None:
            return Encoder(spec, None, resolution)
        module = _jit_load(weights)
        if module is None:
            state = torch.load(weights, map_location="cpu", weights_only=False)
            if isinstance(state, nn.Module):
                module = state
            else:
                try:
                    import torchvision
                except ImportError:
                    raise WeightsNotLoaded(
                        f"{arch}: loading a state dict needs torchvision (pip install 'artifact[resnet]'); "
                        "a TorchScript or pickled module works without it"
                    ) from None
                module = getattr(torchvision.models, arch)(weights=None)
                module.fc = nn.Identity()
                state = {k: v for k, v in state.items() if not k.startswith("fc.")}
                module.load_state_dict(state)
        return Encoder(spec, module, resolution)

    return build


def _posterv2_builder(weights: str | None = None, resolution: int = 224) -> Encoder:
    spec = EncoderSpec("posterv2", 768, weights)
    return Encoder(spec, None if weights is None else _load_module(weights), resolution)


register_encoder(EncoderSpec("posterv2", 768), _posterv2_builder)
register_encoder(EncoderSpec("resnet50", 2048), _resnet_builder("resnet50", 2048))
register_encoder(EncoderSpec("resnet18", 512), _resnet_builder("resnet18", 512))
register_encoder(EncoderSpec("toy-mlp", 8), _build_toy)


# --------------------------------------------------------------------------
# CERF feature cache: b"CERF", u32 version, u32 N, u32 D, N*D little-endian f32

CACHE_MAGIC = b"CERF"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _as_f32(x) -> np.ndarray:
    if isinstance(x, FeatureBatch):
        x = x.features
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if x.ndim != 2:
        raise CacheFormatError(f"feature rows must be 2-D, got shape {x.shape}")
    return np.ascontiguousarray(x, dtype="<f4")


def write_feature_cache(features: Iterable, path: str | Path) -> tuple[int, int]:
    """Stream feature batches into a cache file; returns ``(N, D)``."""
    n, d = 0, None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, 0, 0))
        if isinstance(features, (np.ndarray, torch.Tensor, FeatureBatch)):
            features = [features]
        for batch in features:
            arr = _as_f32(batch)
            if d is None:
                d = arr.shape[1]
            elif arr.shape[1] != d:
                raise CacheFormatError(f"batch width {arr.shape[1]} differs from {d}")
            fh.write(arr.tobytes())
            n += arr.shape[0]
        fh.seek(0)
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, d or 0))
    return n, d or 0


def read_cache_header(path: str | Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack(raw)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    if n > 0 and d == 0:
        raise CacheFormatError(f"{path}: zero width with {n} rows")
    return n, d


def read_feature_cache(path: str | Path, encoder_name: str = "") -> FeatureBatch:
    n, d = read_cache_header(path)
    payload = Path(path).read_bytes()[_HEADER.size :]
    if len(payload) != 4 * n * d:
        raise CacheFormatError(f"{path}: payload is {len(payload)} bytes, header promises {4 * n * d}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureBatch(torch.from_numpy(arr), encoder_name or Path(path).stem)


def iter_feature_cache(path: str | Path, batch_size: int, encoder_name: str = "") -> Iterator[FeatureBatch]:
    full = read_feature_cache(path, encoder_name)
    for start in range(0, full.batch_size, batch_size):
        yield FeatureBatch(full.features[start : start + batch_size], full.encoder_name)
