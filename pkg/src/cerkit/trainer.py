"""Optimization loop: Adam with linear warm-up, epoch bookkeeping, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from cerkit.errors import DataError, NumericError
from cerkit.fusion import FusionConfig, FusionModel
from cerkit.losses import LossWeights, contrastive_nt_xent, cross_entropy, total_loss
from cerkit.metrics import confusion, macro_f1

log = logging.getLogger(__name__)


class NonFiniteLoss(NumericError):
    pass


class CheckpointFormatError(DataError):
    pass


class ConfigError(DataError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    peak_lr: float = 5e-5
    warmup_steps: int = 500
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    checkpoint_every: int = 1
    schedule: str = "constant"
    lambda_basic: float = 1.0
    lambda_cl: float = 0.1
    temperature: float = 0.07
    combine_alpha: float = 1.0
    encoders: str = "posterv2, resnet50"
    hidden_dims: list[int] = field(default_factory=lambda: [512])

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be > 0")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is supported")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("schedule must be 'constant' or 'cosine'")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_basic, self.lambda_cl, self.temperature)


#: keys accepted in a training config file
CONFIG_KEYS = (
    "epochs", "batch_size", "peak_lr", "warmup_steps", "seed", "lambda_basic", "lambda_cl",
    "temperature", "combine_alpha", "encoders", "hidden_dims", "schedule",
)


def _coerce(key: str, value: str):
    if key in ("epochs", "batch_size", "warmup_steps", "seed"):
        return int(value)
    if key in ("peak_lr", "lambda_basic", "lambda_cl", "temperature", "combine_alpha"):
        return float(value)
    if key == "hidden_dims":
        return [int(v) for v in value.replace(",", " ").split()]
    return value.strip()


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``overrides`` (already typed or strings) win."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown or malformed entry {line!r}")
        try:
            values[key] = _coerce(key, value.strip())
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return TrainConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)


def lr_at_step(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warm-up to ``peak_lr``, then constant (or cosine decay to 0)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * ((step + 1) / cfg.warmup_steps)
    if cfg.schedule == "cosine":
        if not total_steps:
            raise ConfigError("cosine schedule needs total_steps")
        span = max(total_steps - cfg.warmup_steps, 1)
        t = min(step - cfg.warmup_steps, span) / span
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return cfg.peak_lr


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_f1: float = 0.0
    best_epoch: int = 0
    rng_seed: int = 0


@dataclass
class TrainBatch:
    features: torch.Tensor
    basic: torch.Tensor
    compound: torch.Tensor
    view1: torch.Tensor | None = None
    view2: torch.Tensor | None = None


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    l_basic: float
    l_ce: float
    l_cl: float
    total: float
    val_macro_f1: float = math.nan

    LOG_HEADER = "epoch,step,lr,L_basic,L_ce,L_CL,total,val_macro_f1"

    def log_line(self) -> str:
        return (
            f"{self.epoch},{self.step},{self.lr:.6e},{self.l_basic:.6f},{self.l_ce:.6f},"
            f"{self.l_cl:.6f},{self.total:.6f},{self.val_macro_f1:.6f}"
        )


class FeatureData:
    """Precomputed fused features with optional per-epoch augmented views.

    ``views(epoch)`` must return two ``N x F`` tensors aligned with
    ``features``; labels use -1 where a record carries no label of that kind.
    """

    def __init__(
        self,
        features: torch.Tensor,
        basic: torch.Tensor,
        compound: torch.Tensor,
        views: Callable[[int], tuple[torch.Tensor, torch.Tensor]] | None = None,
    ):
        n = features.shape[0]
        if basic.shape != (n,) or compound.shape != (n,):
            raise DataError("labels must align with features")
        self.features = features
        self.basic = basic.long()
        self.compound = compound.long()
        self.views = views

    def __len__(self) -> int:
        return self.features.shape[0]

    def num_batches(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)

    def batches(self, epoch: int, batch_size: int, seed: int, shuffle: bool = True) -> Iterator[TrainBatch]:
        n = len(self)
        if shuffle:
            g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
            order = torch.randperm(n, generator=g)
        else:
            order = torch.arange(n)
        v1 = v2 = None
        if self.views is not None:
            v1, v2 = self.views(epoch)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield TrainBatch(
                self.features[idx],
                self.basic[idx],
                self.compound[idx],
                None if v1 is None else v1[idx],
                None if v2 is None else v2[idx],
            )


def make_optimizer(model: FusionModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr_at_step(0, cfg), betas=tuple(cfg.adam_betas))


def compute_losses(model: FusionModel, batch: TrainBatch, weights: LossWeights) -> dict[str, torch.Tensor]:
    """Per-batch losses; each record contributes only what its labels support."""
    out = model(batch.features)
    zero = out.basic_logits.sum() * 0.0
    has_basic = batch.basic >= 0
    has_comp = batch.compound >= 0
    l_basic = cross_entropy(out.basic_probs[has_basic], batch.basic[has_basic]) if has_basic.any() else zero
    l_ce = cross_entropy(out.combined_probs[has_comp], batch.compound[has_comp]) if has_comp.any() else zero
    if batch.view1 is not None and batch.features.shape[0] >= 2 and weights.lambda_cl > 0:
        l_cl = contrastive_nt_xent(model.embed(batch.view1), model.embed(batch.view2), weights.temperature)
    else:
        l_cl = zero
    return {"L_basic": l_basic, "L_ce": l_ce, "L_CL": l_cl, "total": total_loss(l_ce, l_basic, l_cl, weights)}


def train_epoch(
    model: FusionModel,
    optimizer: torch.optim.Optimizer,
    batches: Iterable[TrainBatch],
    cfg: TrainConfig,
    state: TrainState,
    total_steps: int | None = None,
) -> tuple[TrainState, EpochMetrics]:
    """One pass over ``batches``; returns the advanced state and mean losses."""
    model.train()
    weights = cfg.loss_weights
    sums = {"L_basic": 0.0, "L_ce": 0.0, "L_CL": 0.0, "total": 0.0}
    seen = 0
    step = state.step
    lr = lr_at_step(step, cfg, total_steps)
    for batch in batches:
        lr = lr_at_step(step, cfg, total_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        losses = compute_losses(model, batch, weights)
        values = {k: float(v.detach()) for k, v in losses.items()}
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise NonFiniteLoss(f"non-finite {', '.join(bad)} at step {step} (epoch {state.epoch + 1}): {values}")
        optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        optimizer.step()
        b = batch.features.shape[0]
        for k, v in values.items():
            sums[k] += v * b
        seen += b
        step += 1
    n = max(seen, 1)
    new_state = replace(state, step=step, epoch=state.epoch + 1)
    metrics = EpochMetrics(
        new_state.epoch, step, lr, sums["L_basic"] / n, sums["L_ce"] / n, sums["L_CL"] / n, sums["total"] / n
    )
    return new_state, metrics


@torch.no_grad()
def predict_probs(model: FusionModel, features: torch.Tensor, batch_size: int = 1024) -> np.ndarray:
    model.eval()
    out = [model(features[i : i + batch_size]).combined_probs for i in range(0, features.shape[0], batch_size)]
    if not out:
        return np.zeros((0, model.config.compound_classes))
    return torch.cat(out).double().numpy()


def validation_f1(model: FusionModel, features: torch.Tensor, compound: torch.Tensor) -> float:
    keep = compound >= 0
    if not keep.any():
        return math.nan
    pred = predict_probs(model, features[keep]).argmax(axis=1)
    return macro_f1(confusion(compound[keep].numpy(), pred))


def fit(
    model: FusionModel,
    train: FeatureData,
    cfg: TrainConfig,
    val: FeatureData | None = None,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra_meta: dict | None = None,
) -> tuple[TrainState, list[EpochMetrics]]:
    """Train for ``cfg.epochs`` (resuming from ``state``), validating each epoch.

    With ``out_dir`` set, appends to ``train_log.csv``, writes ``last.ckpt``
    every ``checkpoint_every`` epochs and ``best.ckpt`` on each new best
    validation macro-F1.
    """
    torch.manual_seed(cfg.seed)
    state = state or TrainState(rng_seed=cfg.seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    total_steps = cfg.epochs * train.num_batches(cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if state.epoch == 0 or not log_path.exists():
            log_path.write_text(EpochMetrics.LOG_HEADER + "\n", encoding="utf-8")
    history = []
    while state.epoch < cfg.epochs:
        torch.manual_seed(cfg.seed * 7919 + state.epoch)
        batches = train.batches(state.epoch, cfg.batch_size, cfg.seed)
        state, metrics = train_epoch(model, optimizer, batches, cfg, state, total_steps)
        if val is not None:
            metrics.val_macro_f1 = validation_f1(model, val.features, val.compound)
        history.append(metrics)
        log.info(metrics.log_line())
        improved = math.isfinite(metrics.val_macro_f1) and (
            state.best_epoch == 0 or metrics.val_macro_f1 > state.best_val_f1
        )
        if improved:
            state = replace(state, best_val_f1=metrics.val_macro_f1, best_epoch=state.epoch)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(metrics.log_line() + "\n")
        if out is not None:
            meta = dict(extra_meta or {}, val_macro_f1=metrics.val_macro_f1)
            if improved:
                save_checkpoint(out / "best.ckpt", model, state, cfg, optimizer, meta)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_checkpoint(out / "last.ckpt", model, state, cfg, optimizer, meta)
    return state, history


# --------------------------------------------------------------------------
# checkpoint container
#
#   b"CERC" | u32 version | u32 L | L bytes of UTF-8 "key = <json>" lines
#   u32 T | T tensor records:
#       u16 name length | name (UTF-8) | u8 dtype | u8 ndim | ndim x u32 dims
#       | little-endian payload, row-major
#
# dtype codes: 0 float32, 1 float64, 2 int64

CKPT_MAGIC = b"CERC"
CKPT_VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_CODES = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


def _config_block(meta: dict) -> bytes:
    return "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in meta.items()).encode("utf-8")


def write_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    block = _config_block(meta)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(block)), block, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _CODES:
            raise CheckpointFormatError(f"unsupported dtype {t.dtype} for {name}")
        code = _CODES[t.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.numpy(), dtype=_NP[code]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
        version, blen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        pos = 12
        meta = {}
        for line in data[pos : pos + blen].decode("utf-8").splitlines():
            key, _, value = line.partition(" = ")
            meta[key] = json.loads(value)
        pos += blen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_NP[code]).itemsize
            if pos + nbytes > len(data):
                raise CheckpointFormatError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(data, dtype=_NP[code], count=int(np.prod(shape, dtype=np.int64)), offset=pos)
            tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
            pos += nbytes
        if pos != len(data):
            raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return meta, tensors


def save_checkpoint(
    path: str | Path,
    model: FusionModel,
    state: TrainState,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    meta = {f"fusion.{k}": v for k, v in asdict(model.config).items()}
    meta.update({f"state.{k}": v for k, v in asdict(state).items()})
    meta.update({f"train.{k}": v for k, v in asdict(cfg).items()})
    meta.update({f"meta.{k}": v for k, v in (extra or {}).items()})
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        for idx, st in optimizer.state_dict()["state"].items():
            for key, value in st.items():
                tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value)
    write_container(path, meta, tensors)


@dataclass
class Checkpoint:
    model: FusionModel
    state: TrainState
    config: TrainConfig
    meta: dict
    optimizer_state: dict[int, dict[str, torch.Tensor]]

    def make_optimizer(self) -> torch.optim.Adam:
        opt = make_optimizer(self.model, self.config)
        if self.optimizer_state:
            sd = opt.state_dict()
            sd["state"] = {k: dict(v) for k, v in self.optimizer_state.items()}
            opt.load_state_dict(sd)
        return opt


def _section(meta: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in meta.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, tensors = read_container(path)
    try:
        fcfg = FusionConfig(**_section(meta, "fusion."))
        tcfg_raw = _section(meta, "train.")
        tcfg_raw["adam_betas"] = tuple(tcfg_raw["adam_betas"])
        tcfg = TrainConfig(**tcfg_raw)
        state = TrainState(**_section(meta, "state."))
        model = FusionModel(fcfg)
        sd = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
        dtype = next(iter(sd.values())).dtype
        model.to(dtype)
        model.load_state_dict(sd)
    except (TypeError, KeyError, RuntimeError, StopIteration, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: inconsistent checkpoint ({exc})") from None
    optim: dict[int, dict[str, torch.Tensor]] = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            _, idx, key = k.split(".", 2)
            optim.setdefault(int(idx), {})[key] = v
    model.eval()
    return Checkpoint(model, state, tcfg, _section(meta, "meta."), optim)


def resume(path: str | Path) -> tuple[FusionModel, TrainState]:
    ck = load_checkpoint(path)
    return ck.model, ck.state
