"""MSE training with Adam, plateau learning-rate decay, early stopping,
evolution-network pretraining and checkpointing.

Checkpoint directory layout::

    manifest.json   model config plus one entry per tensor (name, dtype,
                    shape, byte offset, byte length, CRC32)
    params.bin      tensors back to back, little-endian (float32 / int64)
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .datamodel import Sample
from .exceptions import CorruptDatasetError, InvalidInputError, ShapeError, TrainingDivergedError
from .models import Forecaster, ModelConfig, ModelVariant, build_model, sample_tensors

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "NWCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 15
    batch_size: int = 16
    max_epochs: int = 100
    seed: int = 0
    pretrained_evo: str | None = None
    freeze_evo: bool = False
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    improve_eps: float = 0.0
    # stop as soon as validation MSE reaches this value (None: train on)
    target_val_mse: float | None = None

    def __post_init__(self):
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise InvalidInputError("patience values must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise InvalidInputError("plateau_factor must be in (0, 1)")
        if self.max_epochs < 1:
            raise InvalidInputError("max_epochs must be >= 1")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch, lead time and pixels."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return ((pred - target) ** 2).mean()


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once validation loss has
    failed to improve for ``patience`` consecutive epochs."""

    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 5
    improve_eps: float = 0.0
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.improve_eps:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def scheduler_step(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)


@dataclass
class EarlyStopState:
    patience: int = 15
    improve_eps: float = 0.0
    best_val: float = math.inf
    epochs_since_best: int = 0
    stopped: bool = False

    def update(self, val_loss: float) -> "EarlyStopState":
        if val_loss < self.best_val - self.improve_eps:
            self.best_val = val_loss
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        self.stopped = self.epochs_since_best >= self.patience
        return self


def early_stopping_update(state: EarlyStopState, val_loss: float) -> EarlyStopState:
    return state.update(val_loss)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    @property
    def train_mse(self):
        return [e.train_mse for e in self.epochs]

    @property
    def val_mse(self):
        return [e.val_mse for e in self.epochs]

    @property
    def lr(self):
        return [e.lr for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse", "lr", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_mse), repr(e.val_mse), repr(e.lr), f"{e.seconds:.3f}"])


class _Tensors:
    def __init__(self, samples: Sequence[Sample], dtype=torch.float32):
        if not samples:
            raise InvalidInputError("empty sample split")
        self.rain, self.aux, self.target = sample_tensors(samples, dtype)

    def __len__(self):
        return self.rain.shape[0]

    def batch(self, idx):
        return self.rain[idx], self.aux[idx], self.target[idx]


@torch.no_grad()
def evaluate_loss(model: nn.Module, data, batch_size: int = 16) -> float:
    """Mean squared error over ``data`` (samples or prepared tensors)."""
    if not isinstance(data, _Tensors):
        data = _Tensors(data)
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    try:
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            rain, aux, target = data.batch(idx)
            pred = model(rain, aux)
            total += float(((pred - target) ** 2).sum(dtype=torch.float64))
            n += target.numel()
    finally:
        model.train(was_training)
    return total / n


def _set_evolution_frozen(model: Forecaster, frozen: bool):
    evo = model.evolution
    if evo is None:
        raise InvalidInputError(f"{model.variant.value} has no evolution network to freeze")
    for p in evo.parameters():
        p.requires_grad_(not frozen)


def _train_mode(model: Forecaster, freeze_evo: bool):
    model.train()
    if freeze_evo and model.evolution is not None:
        # frozen: keep BN statistics and spectral-norm vectors fixed too
        model.evolution.eval()


def fit(model: Forecaster, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
        out_dir=None) -> tuple[Forecaster, TrainHistory]:
    """Train ``model`` in place and return it with its best-validation weights.

    With ``out_dir``, the best checkpoint goes to ``out_dir/checkpoint`` and
    the per-epoch log to ``out_dir/history.csv``.
    """
    if not model.variant.trainable:
        raise InvalidInputError(f"{model.variant.value} has no trainable parameters")
    train_t, val_t = _Tensors(train), _Tensors(val)
    if cfg.pretrained_evo:
        load_pretrained_evolution(model, cfg.pretrained_evo)
    if cfg.freeze_evo:
        _set_evolution_frozen(model, True)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr_init, betas=tuple(cfg.betas), eps=cfg.adam_eps, weight_decay=0.0)
    sched = PlateauScheduler(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience, cfg.improve_eps)
    stopper = EarlyStopState(cfg.early_stop_patience, cfg.improve_eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        _train_mode(model, cfg.freeze_evo)
        order = torch.randperm(len(train_t), generator=gen)
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rain, aux, target = train_t.batch(idx)
            opt.zero_grad(set_to_none=True)
            loss = mse_loss(model(rain, aux), target)
            if not torch.isfinite(loss):
                model.load_state_dict(best_state)
                ckpt = None
                if out_dir is not None and history.best_epoch is not None:
                    ckpt = out_dir / "checkpoint"
                raise TrainingDivergedError(f"non-finite training loss in epoch {epoch}", epoch, ckpt)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        train_mse = total / n
        val_mse = evaluate_loss(model, val_t, cfg.batch_size)
        if not math.isfinite(val_mse):
            model.load_state_dict(best_state)
            raise TrainingDivergedError(f"non-finite validation loss in epoch {epoch}", epoch)
        lr_used = opt.param_groups[0]["lr"]
        history.epochs.append(EpochRecord(epoch, train_mse, val_mse, lr_used, time.perf_counter() - t0))
        log.info("epoch %d train %.6g val %.6g lr %.1e", epoch, train_mse, val_mse, lr_used)

        if val_mse < stopper.best_val - cfg.improve_eps:
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(model, out_dir / "checkpoint", extra={"epoch": epoch, "val_mse": val_mse})
        stopper.update(val_mse)
        new_lr = sched.step(val_mse)
        for group in opt.param_groups:
            group["lr"] = new_lr
        if out_dir is not None:
            history.write_csv(out_dir / "history.csv")
        if stopper.stopped:
            history.stopped_early = True
            break
        if cfg.target_val_mse is not None and val_mse <= cfg.target_val_mse:
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    if cfg.freeze_evo:
        _set_evolution_frozen(model, False)
    return model, history


def pretrain_evolution(train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
                       input_size=None, out_dir=None, seed: int | None = None,
                       evo_base_channels: int | None = None) -> tuple[Forecaster, TrainHistory]:
    """Train a stand-alone evolution network on the rain frames.

    Its checkpoint loads into any model with an evolution submodule via
    :func:`load_pretrained_evolution`.
    """
    size = input_size or train[0].shape
    kw = {} if evo_base_channels is None else {"evo_base_channels": evo_base_channels}
    model = build_model(ModelConfig(ModelVariant.EVO_NET, input_size=size, **kw), cfg.seed if seed is None else seed)
    cfg = replace(cfg, pretrained_evo=None, freeze_evo=False)
    return fit(model, train, val, cfg, out_dir)


# --------------------------------------------------------------------------
# checkpoints


def _tensor_dtype(t: torch.Tensor) -> str:
    return "<f4" if t.is_floating_point() else "<i8"


def save_checkpoint(model: Forecaster, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        dtype = _tensor_dtype(tensor)
        raw = tensor.detach().cpu().numpy().astype(dtype).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (directory / "params.bin").write_bytes(blob)
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "tensors": entries,
        "params_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_checkpoint(directory) -> tuple[ModelConfig, dict, dict]:
    """Load and validate a checkpoint; returns ``(config, state_dict, extra)``."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptDatasetError(f"unreadable checkpoint manifest: {exc}", mpath) from exc
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CorruptDatasetError(f"bad checkpoint magic {manifest.get('magic')!r}", mpath)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CorruptDatasetError(f"unsupported checkpoint version {manifest.get('format_version')!r}", mpath)
    bpath = directory / "params.bin"
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("params_sha256"):
        raise CorruptDatasetError("parameter blob digest does not match the manifest", bpath)
    state = {}
    for e in manifest["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(blob):
            raise CorruptDatasetError(f"tensor {e['name']} is truncated", bpath, start)
        raw = blob[start:start + n]
        if zlib.crc32(raw) != e["crc32"]:
            raise CorruptDatasetError(f"CRC mismatch for tensor {e['name']}", bpath, start)
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    try:
        cfg = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDatasetError(f"malformed model config: {exc}", mpath) from exc
    return cfg, state, manifest.get("extra", {})


def load_checkpoint(directory) -> Forecaster:
    cfg, state, _ = read_checkpoint(directory)
    model = build_model(cfg, seed=0)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CorruptDatasetError(
            f"checkpoint does not match {cfg.variant.value}: missing {list(missing)[:3]}, unexpected {list(unexpected)[:3]}",
            Path(directory) / "manifest.json",
        )
    return model


EVOLUTION_PREFIX = "net.evolution."


def load_pretrained_evolution(model: Forecaster, directory) -> list[str]:
    """Copy the evolution-network tensors of a checkpoint into ``model``.

    Returns the loaded tensor names; raises if any name fails to match.
    """
    if model.evolution is None:
        raise InvalidInputError(f"{model.variant.value} has no evolution network")
    _, state, _ = read_checkpoint(directory)
    evo_state = {k[len(EVOLUTION_PREFIX):]: v for k, v in state.items() if k.startswith(EVOLUTION_PREFIX)}
    if not evo_state:
        raise CorruptDatasetError("checkpoint holds no evolution-network tensors", Path(directory))
    target = model.evolution.state_dict()
    unmatched = sorted(set(evo_state) ^ set(target))
    if unmatched:
        raise CorruptDatasetError(f"unmatched evolution tensors: {unmatched[:5]}", Path(directory))
    mismatched = sorted(k for k, v in evo_state.items() if tuple(v.shape) != tuple(target[k].shape))
    if mismatched:
        raise CorruptDatasetError(f"evolution tensor shapes differ: {mismatched[:5]}", Path(directory))
    model.evolution.load_state_dict(evo_state)
    return sorted(evo_state)
