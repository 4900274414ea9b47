"""Training loop, evaluation and the background-gap metric."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import EVAL_SPLITS, BenchmarkSplit
from .errors import ConfigError, InputError, TrainingDivergedError
from .mask import project_kappa
from .models import Model, report_mask_scales, save_checkpoint
from .optim import AdamW
from .tensor import backward, cross_entropy, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    kappa_lr_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class JsonlWriter:
    """Single writer for newline-delimited JSON records."""

    def __init__(self, path: str | os.PathLike | None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path is not None else None

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _kappas(model: Model) -> list[float]:
    return [s.value for s in model.mask_scales]


def _param_norms(model: Model) -> dict[str, float]:
    return {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters()}


def train(
    model: Model,
    split: BenchmarkSplit,
    cfg: TrainConfig,
    log_path: str | os.PathLike | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> tuple[Model, list[dict]]:
    """Minimise softmax cross-entropy with AdamW; kappa is clamped at 0 after every step."""
    mcfg = model.cfg
    if split.images.shape[1:] != (mcfg.channels,) + mcfg.image_size:
        raise InputError(f"dataset images {split.images.shape[1:]} do not match the model input")
    if split.grid != mcfg.grid:
        raise InputError(f"dataset patch grid {split.grid} != model grid {mcfg.grid}")
    writer = JsonlWriter(log_path)
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay,
                kappa_lr_scale=cfg.kappa_lr_scale)
    rng = np.random.default_rng(cfg.seed)
    dist_all = split.distances().astype(mcfg.np_dtype) if mcfg.oamix else None
    images = split.images.astype(mcfg.np_dtype)
    n = len(split)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                dist = dist_all[idx] if dist_all is not None else None
                logits = model(images[idx], distances=dist)
                loss = cross_entropy(logits, split.targets[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(step, _param_norms(model))
                opt.zero_grad()
                backward(loss)
                opt.step()
                for s in model.mask_scales:
                    project_kappa(s)
                writer.write({"step": step, "epoch": epoch, "loss": value, "kappa": _kappas(model)})
                losses.append(value)
                step += 1
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            writer.write({"event": "epoch", "epoch": epoch, "mean_loss": mean_loss, "kappa": _kappas(model)})
            log.info("epoch %d  loss %.4f  kappa %s", epoch, mean_loss,
                     " ".join(f"{k:.3f}" for k in _kappas(model)))
            if on_epoch is not None:
                on_epoch(epoch, model)
        if mcfg.oamix:
            rep = report_mask_scales(model)
            writer.write({"event": "kappa_report", **rep})
    finally:
        writer.close()
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, step)
    return model, writer.records


def predict(model: Model, split: BenchmarkSplit, batch_size: int = 100) -> np.ndarray:
    mcfg = model.cfg
    preds = []
    dist_all = split.distances().astype(mcfg.np_dtype) if mcfg.oamix else None
    with no_grad():
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            dist = dist_all[sl] if dist_all is not None else None
            logits = model(split.images[sl].astype(mcfg.np_dtype), distances=dist)
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, split: BenchmarkSplit) -> float:
    """Top-1 accuracy; ties go to the lowest class index.

    ``model`` is a :class:`Model` or any callable mapping a split to predicted labels.
    """
    if len(split) == 0:
        raise InputError(f"split {split.name!r} is empty")
    preds = predict(model, split) if isinstance(model, Model) else np.asarray(model(split))
    return float(np.mean(preds == split.targets))


def bg_gap(model, splits: dict[str, BenchmarkSplit]) -> float:
    """accuracy(mixed_same) - accuracy(mixed_rand)."""
    for name in ("mixed_same", "mixed_rand"):
        if name not in splits:
            raise InputError(f"bg_gap needs the {name!r} split")
    return evaluate(model, splits["mixed_same"]) - evaluate(model, splits["mixed_rand"])


def evaluate_all(model, splits: dict[str, BenchmarkSplit]) -> dict[str, float]:
    out = {name: evaluate(model, splits[name]) for name in EVAL_SPLITS if name in splits}
    if "mixed_same" in out and "mixed_rand" in out:
        out["bg_gap"] = out["mixed_same"] - out["mixed_rand"]
    return out
