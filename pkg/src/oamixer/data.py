"""Synthetic foreground/background benchmark with exact patch labels.

Each class is a procedural shape; each class also owns a background texture
family. A training image puts its class's shape over that class's family
with probability ``bg_correlation`` (else over a uniformly drawn family), so
the background is a partial shortcut. Evaluation splits probe it:

* ``original``   - same distribution as training
* ``only_bg``    - background only; accuracy counts predictions of the family's class
* ``mixed_same`` - a foreground over a fresh background of its own family
* ``mixed_rand`` - the *same* foreground instance over another class's family
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, SpecError
from .labels import BINARY_SOFT, PatchLabels, PixelLabelMap, load_label_map, pool_to_patches, save_label_map
from .serialization import load_tensor, save_tensor

SHAPES = ("disk", "cross", "bar", "ring", "triangle", "square")
EVAL_SPLITS = ("original", "only_bg", "mixed_same", "mixed_rand")
SPLITS = ("train",) + EVAL_SPLITS
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

# two endpoint colours per background family, blended by the texture field
_PALETTE = np.array([
    [[0.55, 0.20, 0.15], [0.85, 0.45, 0.25]],
    [[0.10, 0.35, 0.15], [0.35, 0.65, 0.30]],
    [[0.12, 0.18, 0.50], [0.35, 0.45, 0.85]],
    [[0.45, 0.40, 0.10], [0.80, 0.72, 0.30]],
    [[0.40, 0.15, 0.45], [0.70, 0.40, 0.75]],
    [[0.10, 0.40, 0.42], [0.35, 0.72, 0.70]],
    [[0.30, 0.30, 0.30], [0.55, 0.55, 0.55]],
    [[0.50, 0.28, 0.05], [0.25, 0.12, 0.02]],
])
_FREQ = (2, 3, 5, 4, 6, 2, 3, 5)
_ANGLE = (0.0, 0.5 * np.pi, 0.25 * np.pi, 0.75 * np.pi, 0.125 * np.pi, 0.625 * np.pi, 0.375 * np.pi, 0.875 * np.pi)
_PERIOD = (6.0, 9.0, 5.0, 7.0, 8.0, 11.0, 4.5, 10.0)


@dataclass
class SyntheticSpec:
    image_size: tuple[int, int] = (32, 32)
    classes: int = 4
    bg_families: int = 4
    train_samples: int = 2000
    eval_samples: int = 200
    patch: int = 8
    min_size: float = 7.0
    max_size: float = 11.0
    bg_correlation: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.classes < 2:
            raise SpecError(f"need >= 2 classes, got {self.classes}")
        if self.classes > len(SHAPES):
            raise SpecError(f"at most {len(SHAPES)} shape classes are available")
        if self.bg_families < 2 or self.bg_families > len(_PALETTE):
            raise SpecError(f"bg_families must lie in [2, {len(_PALETTE)}], got {self.bg_families}")
        if self.bg_families < self.classes:
            raise SpecError("each class needs its own background family (bg_families >= classes)")
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise SpecError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if not 0 < self.min_size <= self.max_size:
            raise SpecError("shape sizes must satisfy 0 < min_size <= max_size")
        if 2 * self.max_size > min(h, w):
            raise SpecError(f"shape radius {self.max_size} does not fit a {h}x{w} image")
        if not 0.0 <= self.bg_correlation <= 1.0:
            raise SpecError(f"bg_correlation must lie in [0, 1], got {self.bg_correlation}")
        if self.train_samples < 0 or self.eval_samples < 0:
            raise SpecError("sample counts must be nonnegative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class BenchmarkSplit:
    name: str
    images: np.ndarray  # [n, 3, H, W] float32
    targets: np.ndarray  # [n] int
    pixel_masks: np.ndarray  # [n, H, W] float32 foreground coverage
    grid: tuple[int, int]
    meta: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    def patch_labels(self, i: int) -> PatchLabels:
        return pool_to_patches(PixelLabelMap(self.pixel_masks[i][..., None], BINARY_SOFT), self.grid)

    def patch_label_array(self) -> np.ndarray:
        """``[n, N]`` soft foreground fraction per patch."""
        n, h, w = self.pixel_masks.shape
        gh, gw = self.grid
        cells = self.pixel_masks.astype(np.float64).reshape(n, gh, h // gh, gw, w // gw).mean(axis=(2, 4))
        return cells.reshape(n, gh * gw)

    def distances(self) -> np.ndarray:
        """``[n, N, N]`` l1 label distances."""
        y = self.patch_label_array()
        return np.abs(y[:, :, None] - y[:, None, :])


# -- rendering ----------------------------------------------------------------
def shape_mask(kind: str, h: int, w: int, cx: float, cy: float, size: float, angle: float) -> np.ndarray:
    """Binary coverage of pixel centres by a shape of radius ``size``."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = np.hypot(dx, dy)
    if kind == "disk":
        m = r <= size
    elif kind == "ring":
        m = (r <= size) & (r >= 0.55 * size)
    elif kind == "cross":
        arm = 0.3 * size
        m = ((np.abs(u) <= arm) & (np.abs(v) <= size)) | ((np.abs(v) <= arm) & (np.abs(u) <= size))
    elif kind == "bar":
        m = (np.abs(u) <= size) & (np.abs(v) <= 0.35 * size)
    elif kind == "square":
        m = (np.abs(u) <= 0.75 * size) & (np.abs(v) <= 0.75 * size)
    elif kind == "triangle":
        m = (v <= 0.5 * size) & (v >= -size + np.sqrt(3.0) * np.abs(u))
    else:
        raise SpecError(f"unknown shape {kind!r}")
    return m.astype(np.float32)


def _value_noise(rng: np.random.Generator, h: int, w: int, freq: int) -> np.ndarray:
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for octave in range(2):
        f = freq * (2 ** octave)
        grid = rng.random((f + 1, f + 1))
        ys = np.linspace(0, f, h)
        xs = np.linspace(0, f, w)
        y0 = np.minimum(ys.astype(int), f - 1)
        x0 = np.minimum(xs.astype(int), f - 1)
        ty = ys - y0
        tx = xs - x0
        ty = ty * ty * (3 - 2 * ty)
        tx = tx * tx * (3 - 2 * tx)
        a = grid[y0][:, x0]
        b = grid[y0][:, x0 + 1]
        c = grid[y0 + 1][:, x0]
        d = grid[y0 + 1][:, x0 + 1]
        top = a * (1 - tx) + b * tx
        bot = c * (1 - tx) + d * tx
        out += amp * (top * (1 - ty)[:, None] + bot * ty[:, None])
        total += amp
        amp *= 0.5
    return out / total


def render_background(rng: np.random.Generator, family: int, h: int, w: int) -> np.ndarray:
    noise = _value_noise(rng, h, w, _FREQ[family])
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi)
    ang = _ANGLE[family] + rng.normal(0, 0.1)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / _PERIOD[family] + phase)
    t = np.clip(0.55 * noise + 0.45 * stripes, 0, 1)
    lo, hi = _PALETTE[family]
    img = lo[:, None, None] * (1 - t) + hi[:, None, None] * t
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1)


def foreground_params(rng: np.random.Generator, spec: SyntheticSpec, cls: int) -> dict:
    h, w = spec.image_size
    size = float(rng.uniform(spec.min_size, spec.max_size))
    cx = float(rng.uniform(size, w - size))
    cy = float(rng.uniform(size, h - size))
    angle = float(rng.uniform(0, np.pi))
    gray = float(rng.uniform(0.7, 1.0))
    tint = [float(v) for v in rng.uniform(-0.08, 0.08, size=3)]
    return {"shape": SHAPES[cls], "cx": cx, "cy": cy, "size": size, "angle": angle,
            "gray": gray, "tint": tint, "texture_seed": int(rng.integers(2**31))}


def render_foreground(params: dict, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    mask = shape_mask(params["shape"], h, w, params["cx"], params["cy"], params["size"], params["angle"])
    frng = np.random.default_rng(params["texture_seed"])
    shade = 0.85 + 0.15 * _value_noise(frng, h, w, 4)
    color = np.clip(params["gray"] + np.asarray(params["tint"]), 0, 1)
    fg = color[:, None, None] * shade[None]
    return fg, mask


def composite(bg: np.ndarray, fg: np.ndarray | None, mask: np.ndarray | None) -> np.ndarray:
    if fg is None:
        return bg.astype(np.float32)
    return (bg * (1 - mask[None]) + fg * mask[None]).astype(np.float32)


def _sample_rng(seed: int, split: str, index: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], index, role]))


def _make_split(spec: SyntheticSpec, name: str) -> BenchmarkSplit:
    h, w = spec.image_size
    n = spec.train_samples if name == "train" else spec.eval_samples
    images = np.zeros((n, 3, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.float32)
    targets = np.zeros(n, dtype=np.int64)
    meta = []
    # mixed_same / mixed_rand share the foreground stream of one pairing split
    fg_split = "mixed_same" if name in ("mixed_same", "mixed_rand") else name
    for i in range(n):
        cls = i % spec.classes
        fg_rng = _sample_rng(spec.seed, fg_split, i, 0)
        bg_rng = _sample_rng(spec.seed, name, i, 1)
        family = cls
        if name in ("train", "original"):
            if bg_rng.random() >= spec.bg_correlation:
                family = int(bg_rng.integers(spec.bg_families))
        elif name == "mixed_rand":
            others = [f for f in range(spec.bg_families) if f != cls]
            family = int(others[bg_rng.integers(len(others))])
        bg = render_background(bg_rng, family, h, w)
        rec = {"class": cls, "bg_family": family}
        if name == "only_bg":
            images[i] = composite(bg, None, None)
        else:
            params = foreground_params(fg_rng, spec, cls)
            fg, mask = render_foreground(params, h, w)
            images[i] = composite(bg, fg, mask)
            masks[i] = mask
            rec["fg"] = params
        targets[i] = cls
        meta.append(rec)
    return BenchmarkSplit(name, images, targets, masks, spec.grid, meta)


def gen_dataset(spec: SyntheticSpec) -> dict[str, BenchmarkSplit]:
    return {name: _make_split(spec, name) for name in SPLITS}


# -- on-disk layout -----------------------------------------------------------
def save_dataset(splits: dict[str, BenchmarkSplit], spec: SyntheticSpec, out: str | os.PathLike) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"spec": spec.to_dict(), "seed": spec.seed, "splits": {}}
    for name, split in splits.items():
        d = out / name
        d.mkdir(exist_ok=True)
        for i in range(len(split)):
            save_tensor(d / f"{i}.oat1", split.images[i])
            save_label_map(d / f"{i}.oal1", PixelLabelMap(split.pixel_masks[i][..., None], BINARY_SOFT))
        meta["splits"][name] = {"targets": split.targets.tolist(), "samples": split.meta}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | os.PathLike, splits=None) -> tuple[dict[str, BenchmarkSplit], SyntheticSpec]:
    path = Path(path)
    mf = path / "meta.json"
    if not mf.is_file():
        raise InputError(f"{path} is not a dataset directory (no meta.json)")
    meta = json.loads(mf.read_text())
    spec = SyntheticSpec(**meta["spec"])
    out = {}
    for name, info in meta["splits"].items():
        if splits is not None and name not in splits:
            continue
        n = len(info["targets"])
        h, w = spec.image_size
        images = np.zeros((n, 3, h, w), dtype=np.float32)
        masks = np.zeros((n, h, w), dtype=np.float32)
        for i in range(n):
            images[i] = load_tensor(path / name / f"{i}.oat1").data
            masks[i] = load_label_map(path / name / f"{i}.oal1").values[..., 0]
        out[name] = BenchmarkSplit(name, images, np.asarray(info["targets"], dtype=np.int64),
                                   masks, spec.grid, info["samples"])
    return out, spec


def directory_digest(path: str | os.PathLike) -> str:
    """SHA-256 over relative paths and contents of every file under ``path``."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
