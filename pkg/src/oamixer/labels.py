"""Object-label maps: file IO, pooling to the patch grid, pairwise distances."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

BINARY_SOFT = "binary_soft"
MULTI_CLASS = "multi_class"
_KIND_CODE = {BINARY_SOFT: 0, MULTI_CLASS: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

OAL_MAGIC = b"OAL1"
OAL_VERSION = 1
_HEADER = struct.Struct("<4sBBIII")

RESAMPLE_FACTOR = 4
SIMPLEX_SLACK = 1e-4


@dataclass(frozen=True)
class PixelLabelMap:
    values: np.ndarray  # [H, W, K]
    kind: str = BINARY_SOFT

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValidationError(f"label map must be [H, W, K], got shape {v.shape}")
        object.__setattr__(self, "values", v)
        _validate_values(v, self.kind)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PatchLabels:
    y: np.ndarray  # [N, K]
    kind: str = BINARY_SOFT

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise ValidationError(f"patch labels must be [N, K], got shape {y.shape}")
        object.__setattr__(self, "y", y)
        if self.kind == BINARY_SOFT:
            if y.shape[1] != 1:
                raise ValidationError(f"binary_soft labels need K == 1, got K = {y.shape[1]}")
            bad = np.argwhere((y < 0) | (y > 1))
            if len(bad):
                raise ValidationError(f"binary_soft label outside [0, 1] at {tuple(bad[0])}")
        elif self.kind == MULTI_CLASS:
            bad = np.argwhere(y < 0)
            if len(bad):
                raise ValidationError(f"negative multi_class label at {tuple(bad[0])}")
        else:
            raise ValidationError(f"unknown label kind {self.kind!r}")

    @property
    def n_patches(self) -> int:
        return self.y.shape[0]

    @property
    def classes(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray  # [N, N]

    @property
    def n(self) -> int:
        return self.d.shape[0]


def _validate_values(v: np.ndarray, kind: str) -> None:
    if kind not in _KIND_CODE:
        raise ValidationError(f"unknown label kind {kind!r}")
    if kind == BINARY_SOFT and v.shape[2] != 1:
        raise ValidationError(f"binary_soft maps need K == 1, got K = {v.shape[2]}")
    bad = np.argwhere(~((v >= 0) & (v <= 1)))
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise ValidationError(f"label value {v[idx]!r} outside [0, 1] at index {idx}")
    if kind == MULTI_CLASS:
        over = np.argwhere(v.sum(axis=-1) > 1 + SIMPLEX_SLACK)
        if len(over):
            idx = tuple(int(i) for i in over[0])
            raise ValidationError(f"class vector at pixel {idx} sums above 1")


# -- OAL1 files ---------------------------------------------------------------
def encode_label_map(m: PixelLabelMap) -> bytes:
    h, w, k = m.values.shape
    head = _HEADER.pack(OAL_MAGIC, OAL_VERSION, _KIND_CODE[m.kind], h, w, k)
    return head + np.ascontiguousarray(m.values, dtype="<f4").tobytes()


def decode_label_map(buf: bytes) -> PixelLabelMap:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated OAL1 header")
    magic, version, kind_code, h, w, k = _HEADER.unpack_from(buf)
    if magic != OAL_MAGIC:
        raise FormatError(f"bad OAL1 magic {magic!r}")
    if version != OAL_VERSION:
        raise FormatError(f"unsupported OAL1 version {version}")
    if kind_code not in _CODE_KIND:
        raise FormatError(f"unknown OAL1 kind code {kind_code}")
    expected = h * w * k * 4
    if len(buf) - _HEADER.size != expected:
        raise FormatError(f"OAL1 payload is {len(buf) - _HEADER.size} bytes, expected {expected}")
    values = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, k).astype(np.float32)
    return PixelLabelMap(values, _CODE_KIND[kind_code])


def save_label_map(path: str | os.PathLike, m: PixelLabelMap) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_label_map(m))


def load_label_map(path: str | os.PathLike) -> PixelLabelMap:
    with open(path, "rb") as fh:
        return decode_label_map(fh.read())


# -- pooling ------------------------------------------------------------------
def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an ``[H, W, K]`` array."""
    h, w = values.shape[:2]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    v = values.astype(np.float64)
    top = v[y0][:, x0] * (1 - fx)[None, :, None] + v[y0][:, x1] * fx[None, :, None]
    bot = v[y1][:, x0] * (1 - fx)[None, :, None] + v[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def pool_to_patches(m: PixelLabelMap, grid: tuple[int, int]) -> PatchLabels:
    """Average pixel label vectors over each cell of a ``(rows, cols)`` patch grid.

    Maps whose size is not an integer multiple of the grid are first
    bilinearly resampled to ``RESAMPLE_FACTOR`` pixels per cell. Patches are
    ordered row-major.
    """
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise ValidationError(f"grid must be positive, got {grid}")
    v = m.values.astype(np.float64)
    h, w, k = v.shape
    if h % gh or w % gw:
        v = bilinear_resize(v, gh * RESAMPLE_FACTOR, gw * RESAMPLE_FACTOR)
        h, w = v.shape[:2]
    ph, pw = h // gh, w // gw
    cells = v.reshape(gh, ph, gw, pw, k).mean(axis=(1, 3))
    y = cells.reshape(gh * gw, k)
    if m.kind == BINARY_SOFT:
        y = np.clip(y, 0.0, 1.0)
    return PatchLabels(y, m.kind)


# -- distances ----------------------------------------------------------------
def distance_binary_l1(yi: float, yj: float) -> float:
    for v in (yi, yj):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"binary label {v!r} outside [0, 1]")
    return abs(float(yi) - float(yj))


def distance_multiclass_cosine(yi, yj) -> float:
    """Cosine distance with d(0, 0) = 0 and d(0, y) = 1 for y != 0."""
    a = np.asarray(yi, dtype=np.float64)
    b = np.asarray(yj, dtype=np.float64)
    if (a < 0).any() or (b < 0).any():
        raise ValidationError("multi-class labels must be nonnegative")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    return float(min(max(1.0 - a.dot(b) / (na * nb), 0.0), 1.0))


def pairwise_distance_matrix(labels: PatchLabels) -> DistanceMatrix:
    y = labels.y
    if labels.kind == BINARY_SOFT:
        v = y[:, 0]
        d = np.abs(v[:, None] - v[None, :])
    else:
        norms = np.linalg.norm(y, axis=1)
        zero = norms == 0
        safe = np.where(zero, 1.0, norms)
        u = y / safe[:, None]
        d = np.clip(1.0 - u @ u.T, 0.0, 1.0)
        d[zero[:, None] ^ zero[None, :]] = 1.0
        d[zero[:, None] & zero[None, :]] = 0.0
        d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d)
