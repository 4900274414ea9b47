"""Toy DeiT-, MLP-Mixer- and ConvMixer-like classifiers with optional OAMixer blocks."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError, StateError
from .labels import PatchLabels, pairwise_distance_matrix
from .layers import ATTENTION, CONV, TOKEN_MLP, Block, LayerNorm, Linear, Module, trunc_normal
from .mask import quarter_averaged_scales
from .serialization import load_tensor, save_tensor
from .tensor import Tensor, add, broadcast_to, concat, getitem, mean, reshape

DEIT = "deit_like"
MIXER = "mixer_like"
CONVMIXER = "convmixer_like"
FAMILIES = {DEIT: ATTENTION, MIXER: TOKEN_MLP, CONVMIXER: CONV}


@dataclass
class ModelConfig:
    family: str = DEIT
    image_size: tuple[int, int] = (32, 32)
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    kernel_size: int = 3
    token_hidden: int = 32
    classes: int = 4
    channels: int = 3
    oamix: bool = False
    kernel_sharing: str = "shared"
    dtype: str = "float32"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {sorted(FAMILIES)}")
        h, w = self.image_size
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch}")
        if min(self.dim, self.depth, self.classes, self.channels) < 1:
            raise ConfigError("dim, depth, classes and channels must be positive")
        if self.family == DEIT and (self.heads < 1 or self.dim % self.heads):
            raise ConfigError(f"embed dim {self.dim} is not divisible by {self.heads} heads")
        if self.family == CONVMIXER and self.kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {self.kernel_size}")
        if self.kernel_sharing not in ("shared", "full"):
            raise ConfigError(f"kernel_sharing must be 'shared' or 'full', got {self.kernel_sharing!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__("")
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        p2c = cfg.patch * cfg.patch * cfg.channels
        n = cfg.n_patches
        self.embed = self.add_child("embed", Linear(p2c, cfg.dim, rng, dt, "embed"))
        self.pos_embed = None
        self.cls_token = None
        if cfg.family == DEIT:
            self.pos_embed = self.add_param("pos_embed", trunc_normal(rng, (n, cfg.dim), dtype=dt))
            self.cls_token = self.add_param("cls_token", trunc_normal(rng, (1, 1, cfg.dim), dtype=dt))
        kind = FAMILIES[cfg.family]
        self.blocks: list[Block] = []
        for i in range(cfg.depth):
            blk = Block(
                kind, cfg.dim, rng, index=i, dtype=dt, heads=cfg.heads, n_tokens=n,
                token_hidden=cfg.token_hidden, grid=cfg.grid, kernel_size=cfg.kernel_size,
                shared_kernel=cfg.kernel_sharing == "shared", oamix=cfg.oamix,
                has_cls=cfg.family == DEIT,
            )
            self.blocks.append(self.add_child(f"block{i}", blk))
        self.norm = self.add_child("norm", LayerNorm(cfg.dim, dt, "norm"))
        self.head = self.add_child("head", Linear(cfg.dim, cfg.classes, rng, dt, "head"))

    @property
    def mask_scales(self):
        return [b.kappa for b in self.blocks if b.kappa is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise FormatError(f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise FormatError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def __call__(self, images, labels=None, distances=None) -> Tensor:
        return forward(self, images, labels, distances)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, N, P*P*C]`` with row-major patches and (row, col, channel) flattening."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch * patch * c))


def patch_embed(images, model: Model) -> Tensor:
    cfg = model.cfg
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != cfg.channels or tuple(arr.shape[2:]) != cfg.image_size:
        raise ConfigError(
            f"images of shape {arr.shape} do not match [B, {cfg.channels}, {cfg.image_size[0]}, {cfg.image_size[1]}]"
        )
    patches = Tensor(patchify(arr.astype(cfg.np_dtype, copy=False), cfg.patch))
    tokens = model.embed(patches)
    if model.pos_embed is not None:
        tokens = add(tokens, model.pos_embed)
    return tokens


def distances_for(labels, n_patches: int, dtype) -> np.ndarray:
    if isinstance(labels, PatchLabels):
        labels = [labels]
    mats = []
    for lab in labels:
        if lab.n_patches != n_patches:
            raise InputError(f"labels cover {lab.n_patches} patches, model grid has {n_patches}")
        mats.append(pairwise_distance_matrix(lab).d)
    return np.stack(mats).astype(dtype)


def forward(model: Model, images, labels: PatchLabels | Sequence[PatchLabels] | None = None,
            distances: np.ndarray | None = None) -> Tensor:
    """Logits ``[classes]`` for one ``[C,H,W]`` image or ``[B, classes]`` for a batch.

    Object-aware models need per-image patch labels (or precomputed
    ``[B, N, N]`` distances); one distance matrix per image feeds every block.
    """
    cfg = model.cfg
    single = np.ndim(images.data if isinstance(images, Tensor) else images) == 3
    x = patch_embed(images, model)
    b = x.shape[0]
    dist = None
    if cfg.oamix:
        if distances is None:
            if labels is None:
                raise InputError("object-aware model needs patch labels")
            distances = distances_for(labels, cfg.n_patches, cfg.np_dtype)
        dist = np.asarray(distances, dtype=cfg.np_dtype)
        if dist.ndim == 2:
            dist = dist[None]
        if dist.shape != (b, cfg.n_patches, cfg.n_patches):
            raise InputError(f"distances shape {dist.shape} != {(b, cfg.n_patches, cfg.n_patches)}")
        dist = Tensor(dist)
    if model.cls_token is not None:
        cls = broadcast_to(model.cls_token, (b, 1, cfg.dim))
        x = concat([cls, x], axis=1)
    for blk in model.blocks:
        x = blk(x, dist)
    x = model.norm(x)
    pooled = getitem(x, (slice(None), 0)) if model.cls_token is not None else mean(x, axis=1)
    logits = model.head(pooled)
    return reshape(logits, (cfg.classes,)) if single else logits


def report_mask_scales(model: Model) -> dict:
    if not model.cfg.oamix:
        raise StateError("model has no mask scales (oamix is off)")
    per_layer = [s.value for s in model.mask_scales]
    return {"per_layer": per_layer, "quarters": list(quarter_averaged_scales(per_layer))}


# -- checkpoints --------------------------------------------------------------
MANIFEST = "manifest.json"


def save_checkpoint(model: Model, path: str | os.PathLike, step: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        save_tensor(path / f"{name}.oat1", p)
        names.append(name)
    manifest = {"config": model.cfg.to_dict(), "seed": model.seed, "step": step, "parameters": names}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Model, dict]:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.is_file():
        raise FormatError(f"no {MANIFEST} in checkpoint directory {path}")
    manifest = json.loads(mf.read_text())
    model = Model(ModelConfig.from_dict(manifest["config"]), manifest.get("seed", 0))
    state = {name: load_tensor(path / f"{name}.oat1").data for name in manifest["parameters"]}
    model.load_state_dict(state)
    return model, manifest
