"""JSON run configuration.

Keys::

    {
      "seed": 0,                      # default seed for data, init and shuffling
      "dataset": "path/to/dataset",   # optional; generated in memory from "data" if absent
      "model": {...ModelConfig fields...},
      "train": {...TrainConfig fields...},
      "data":  {...SyntheticSpec fields...}
    }

A section-level ``seed`` overrides the top-level one for that section.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig

TOP_KEYS = {"seed", "dataset", "model", "train", "data"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model_seed: int = 0
    dataset: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.model_seed,
            "dataset": self.dataset,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
        }


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    base_seed = int(raw.get("seed", 0)) if seed is None else seed
    model = dict(raw.get("model", {}))
    model_seed = int(model.pop("seed", base_seed)) if seed is None else seed
    train = dict(raw.get("train", {}))
    train.setdefault("seed", base_seed)
    data = dict(raw.get("data", {}))
    data.setdefault("seed", base_seed)
    if seed is not None:
        train["seed"] = data["seed"] = seed
    try:
        mcfg = ModelConfig.from_dict(model)
        tcfg = TrainConfig.from_dict(train)
        dspec = SyntheticSpec(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if dspec.image_size != mcfg.image_size or dspec.patch != mcfg.patch:
        raise ConfigError(
            f"data image_size/patch {dspec.image_size}/{dspec.patch} disagree with model "
            f"{mcfg.image_size}/{mcfg.patch}"
        )
    if dspec.classes != mcfg.classes:
        raise ConfigError(f"data has {dspec.classes} classes, model has {mcfg.classes}")
    return RunConfig(mcfg, tcfg, dspec, model_seed, raw.get("dataset"))


def load_config(path: str | os.PathLike, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = parse_config(raw, seed)
    if cfg.dataset is not None and not os.path.isabs(cfg.dataset):
        cfg.dataset = str((path.parent / cfg.dataset).resolve())
    return cfg
