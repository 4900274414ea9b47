"""Object-aware reweighting masks ``M_ij = exp(-kappa * d_ij)``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvariantError, ParameterError, StateError
from .labels import DistanceMatrix
from .tensor import Parameter, Tensor, concat, exp, mul, neg


class MaskScale:
    """Learnable nonnegative mask sharpness for one patch-mixing layer."""

    def __init__(self, layer_index: int, dtype=np.float32, name: str | None = None):
        self.layer_index = layer_index
        self.raw = Parameter(np.zeros((), dtype=dtype), name or f"blocks.{layer_index}.kappa")

    @property
    def value(self) -> float:
        return float(self.raw.data)

    @value.setter
    def value(self, v: float) -> None:
        self.raw.data[...] = v

    def __repr__(self) -> str:
        return f"MaskScale(layer={self.layer_index}, kappa={self.value:.4g})"


@dataclass(frozen=True)
class ReweightMask:
    m: Tensor  # [..., T, T]
    has_cls: bool = False
    source_layer: int = -1

    @property
    def size(self) -> int:
        return self.m.shape[-1]


def _as_distance_tensor(d, dtype) -> Tensor:
    if isinstance(d, DistanceMatrix):
        d = d.d
    if isinstance(d, Tensor):
        return d
    return Tensor(np.asarray(d, dtype=dtype))


def build_mask(d, kappa: MaskScale) -> ReweightMask:
    """``exp(-kappa * d)``; differentiable in kappa. ``d`` may carry batch axes."""
    if kappa.value < 0:
        raise InvariantError(
            f"mask scale of layer {kappa.layer_index} is negative ({kappa.value}); "
            "project_kappa must run after every optimizer step"
        )
    dt = _as_distance_tensor(d, kappa.raw.dtype)
    return ReweightMask(exp(neg(mul(dt, kappa.raw))), False, kappa.layer_index)


def augment_cls(mask: ReweightMask) -> ReweightMask:
    """Prepend a [CLS] row and column of ones."""
    if mask.has_cls:
        raise StateError("mask already carries a [CLS] row/column")
    m = mask.m
    lead = m.shape[:-2]
    n = m.shape[-1]
    col = Tensor(np.ones(lead + (n, 1), dtype=m.dtype))
    row = Tensor(np.ones(lead + (1, n + 1), dtype=m.dtype))
    out = concat([row, concat([col, m], axis=-1)], axis=-2)
    return ReweightMask(out, True, mask.source_layer)


def project_kappa(scale: MaskScale) -> None:
    np.maximum(scale.raw.data, 0, out=scale.raw.data)


def quarter_averaged_scales(scales: Sequence[MaskScale | float]) -> tuple[float, float, float, float]:
    """Mean kappa over four contiguous depth groups; earlier groups absorb the remainder."""
    values = [s.value if isinstance(s, MaskScale) else float(s) for s in scales]
    n = len(values)
    if n < 4:
        raise ParameterError(f"need at least 4 layers to form quarters, got {n}")
    base, extra = divmod(n, 4)
    out = []
    start = 0
    for q in range(4):
        size = base + (1 if q < extra else 0)
        group = values[start:start + size]
        out.append(sum(group) / size)
        start += size
    return tuple(out)


def format_kappa_table(rows: dict[str, Sequence[float]]) -> str:
    """Render quarter averages as a ``Layer 1/4 .. Layer 4/4`` table."""
    width = max([len(k) for k in rows] + [5])
    head = " " * width + "".join(f"  Layer {q}/4" for q in range(1, 5))
    lines = [head]
    for name, quarters in rows.items():
        lines.append(name.ljust(width) + "".join(f"  {v:9.3f}" for v in quarters))
    return "\n".join(lines)
