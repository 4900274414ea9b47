"""Patch-mixing layers (attention, token MLP, depthwise conv), vanilla and object-aware.

Token tensors are ``[T, D]`` or ``[B, T, D]``. Masks are ``[T, T]`` or
``[B, T, T]`` and are shared across heads and channels.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, DimensionError
from .mask import MaskScale, ReweightMask, augment_cls, build_mask
from .tensor import (
    Parameter,
    Tensor,
    add,
    broadcast_to,
    depthwise_conv2d,
    gelu,
    identity,
    layer_norm,
    masked_softmax,
    matmul,
    mul,
    reshape,
    scale,
    softmax_lastdim,
    sub,
    take_last,
    transpose,
)

INIT_STD = 0.02

ATTENTION = "attention"
TOKEN_MLP = "token_mlp"
CONV = "conv"
KINDS = (ATTENTION, TOKEN_MLP, CONV)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Container with named, ordered parameters and submodules."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, self._name(name))
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self._params.values():
            yield p.name, p
        for child in self._children.values():
            yield from child.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, prefix: str = "", bias: bool = True):
        super().__init__(prefix)
        self.weight = self.add_param("weight", trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = self.add_param("bias", np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, prefix: str = "", eps: float = 1e-5):
        super().__init__(prefix)
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


# -- self-attention -----------------------------------------------------------
class AttentionLayer(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32, prefix: str = ""):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embed dim {dim} is not divisible by {heads} heads")
        super().__init__(prefix)
        self.dim = dim
        self.heads = heads
        self.wq = self.add_param("wq", trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wk = self.add_param("wk", trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wv = self.add_param("wv", trunc_normal(rng, (dim, dim), dtype=dtype))
        self.wo = self.add_param("wo", trunc_normal(rng, (dim, dim), dtype=dtype))
        self.bo = self.add_param("bo", np.zeros(dim, dtype=dtype))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected [T, D] or [B, T, D] tokens, got shape {x.shape}")


def _mask_tensor(mask: ReweightMask, batch: int, tokens: int) -> Tensor:
    m = mask.m
    if m.shape[-1] != tokens or m.shape[-2] != tokens:
        raise DimensionError(f"mask is {m.shape[-2]}x{m.shape[-1]} but there are {tokens} tokens")
    if m.ndim == 2:
        m = reshape(m, (1, tokens, tokens))
    if m.ndim != 3 or m.shape[0] not in (1, batch):
        raise DimensionError(f"mask shape {m.shape} does not match batch {batch}")
    return m


def attention_weights(x: Tensor, layer: AttentionLayer, mask: ReweightMask | None = None) -> Tensor:
    """Per-head attention ``[B, H, T, T]``; renormalised masked attention when ``mask`` is given."""
    xb, _ = _batched(x)
    b, t, d = xb.shape
    if layer.dim % layer.heads:
        raise ConfigError(f"embed dim {layer.dim} is not divisible by {layer.heads} heads")
    if d != layer.dim:
        raise DimensionError(f"tokens have width {d}, layer expects {layer.dim}")
    h, dh = layer.heads, layer.head_dim

    def split(w):
        return transpose(reshape(matmul(xb, w), (b, t, h, dh)), (0, 2, 1, 3))

    q, k = split(layer.wq), split(layer.wk)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is None:
        return softmax_lastdim(logits)
    m = _mask_tensor(mask, b, t)
    return masked_softmax(logits, reshape(m, (m.shape[0], 1, t, t)))


def _attention(x: Tensor, layer: AttentionLayer, mask: ReweightMask | None) -> Tensor:
    xb, squeeze = _batched(x)
    b, t, d = xb.shape
    h, dh = layer.heads, layer.head_dim
    a = attention_weights(xb, layer, mask)
    v = transpose(reshape(matmul(xb, layer.wv), (b, t, h, dh)), (0, 2, 1, 3))
    mixed = reshape(transpose(matmul(a, v), (0, 2, 1, 3)), (b, t, d))
    out = add(matmul(mixed, layer.wo), layer.bo)
    return reshape(out, (t, d)) if squeeze else out


def attention_vanilla(x: Tensor, layer: AttentionLayer) -> Tensor:
    return _attention(x, layer, None)


def attention_oamix(x: Tensor, layer: AttentionLayer, mask: ReweightMask) -> Tensor:
    return _attention(x, layer, mask)


# -- token MLP ----------------------------------------------------------------
class TokenMLP(Module):
    """Per-channel MLP over the patch axis, ``W2 . act(W1 . col)``; W1 is [hidden, N]."""

    def __init__(self, n_tokens: int, hidden: int, rng, dtype=np.float32, prefix: str = "",
                 activation: Callable[[Tensor], Tensor] = gelu):
        super().__init__(prefix)
        self.n_tokens = n_tokens
        self.w1 = self.add_param("w1", trunc_normal(rng, (hidden, n_tokens), dtype=dtype))
        self.w2 = self.add_param("w2", trunc_normal(rng, (n_tokens, hidden), dtype=dtype))
        self.activation = activation
        self.weights: list[Parameter] = [self.w1, self.w2]


def token_mlp_vanilla(x: Tensor, mlp: TokenMLP) -> Tensor:
    if x.shape[-2] != mlp.n_tokens:
        raise DimensionError(f"token MLP expects {mlp.n_tokens} tokens, got {x.shape[-2]}")
    if mlp.activation is identity:
        # a linear network is its collapsed product; this keeps f(x) - L x exactly zero
        return matmul(linearize_token_mlp(mlp), x)
    h = matmul(mlp.weights[0], x)
    for w in mlp.weights[1:]:
        h = matmul(w, mlp.activation(h))
    return h


def linearize_token_mlp(mlp: TokenMLP) -> Tensor:
    """``W_m ... W_1`` with activations dropped, ``[N, N]``."""
    weights = mlp.weights
    out = weights[0]
    for w in weights[1:]:
        out = matmul(w, out)
    return out


def token_mlp_residual(x: Tensor, mlp: TokenMLP) -> Tensor:
    """Nonlinear remainder ``f(x) - L x`` left after the linear term is removed."""
    return sub(token_mlp_vanilla(x, mlp), matmul(linearize_token_mlp(mlp), x))


def token_mlp_oamix(x: Tensor, mlp: TokenMLP, mask: ReweightMask) -> Tensor:
    """Masked linear part plus the nonlinear residual.

    Evaluated as ``f(x) + ((M*L) x - L x)``, which equals the masked-linear +
    residual split but yields exactly ``f(x)`` when ``M`` is all ones.
    """
    if mask.has_cls:
        raise DimensionError("token-MLP mixing takes a plain N x N mask, not a [CLS]-augmented one")
    n = mlp.n_tokens
    if mask.m.shape[-1] != n:
        raise DimensionError(f"mask is {mask.m.shape[-1]}x{mask.m.shape[-1]} but there are {n} tokens")
    f = token_mlp_vanilla(x, mlp)
    lin = linearize_token_mlp(mlp)
    m = mask.m
    masked = mul(m, lin)
    plain = broadcast_to(lin, masked.shape) if masked.shape != lin.shape else lin
    return add(f, sub(matmul(masked, x), matmul(plain, x)))


# -- convolution --------------------------------------------------------------
class ConvMixing(Module):
    def __init__(self, grid: tuple[int, int], kernel_size: int, channels: int, rng,
                 dtype=np.float32, prefix: str = "", shared: bool = True):
        if kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {kernel_size}")
        super().__init__(prefix)
        self.grid = tuple(grid)
        self.kernel_size = kernel_size
        self.shared = shared
        c = 1 if shared else channels
        self.kernel = self.add_param("kernel", trunc_normal(rng, (c, kernel_size, kernel_size), dtype=dtype))

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


def _tap_neighbours(grid: tuple[int, int], s: int) -> tuple[np.ndarray, np.ndarray]:
    """For each tap t and output patch p: flat neighbour index and an in-bounds flag."""
    gh, gw = grid
    r = s // 2
    n = gh * gw
    nb = np.zeros((s * s, n), dtype=np.intp)
    valid = np.zeros((s * s, n), dtype=bool)
    for t in range(s * s):
        di, dj = divmod(t, s)
        for p in range(n):
            a, c = divmod(p, gw)
            qa, qc = a + di - r, c + dj - r
            if 0 <= qa < gh and 0 <= qc < gw:
                nb[t, p] = qa * gw + qc
                valid[t, p] = True
            else:
                nb[t, p] = p
    return nb, valid


def toeplitz_from_kernel(conv: ConvMixing) -> Tensor:
    """Matrix ``W`` with ``W @ x_flat == depthwise_conv2d(x)``; ``[N,N]`` shared, ``[C,N,N]`` per-channel."""
    s = conv.kernel_size
    n = conv.n_tokens
    nb, valid = _tap_neighbours(conv.grid, s)
    basis = np.zeros((s * s, n, n), dtype=conv.kernel.dtype)
    for t in range(s * s):
        rows = np.nonzero(valid[t])[0]
        basis[t, rows, nb[t, rows]] = 1
    c = conv.kernel.shape[0]
    flat = matmul(reshape(conv.kernel, (c, s * s)), Tensor(basis.reshape(s * s, n * n)))
    return reshape(flat, (n, n)) if conv.shared else reshape(flat, (c, n, n))


def _to_grid(x: Tensor, grid) -> tuple[Tensor, bool]:
    xb, squeeze = _batched(x)
    b, n, d = xb.shape
    if n != grid[0] * grid[1]:
        raise DimensionError(f"{n} tokens do not fill a {grid[0]}x{grid[1]} grid")
    return reshape(transpose(xb, (0, 2, 1)), (b, d, grid[0], grid[1])), squeeze


def _from_grid(y: Tensor, squeeze: bool) -> Tensor:
    b, d, gh, gw = y.shape
    out = transpose(reshape(y, (b, d, gh * gw)), (0, 2, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_mixing_vanilla(x: Tensor, conv: ConvMixing) -> Tensor:
    g, squeeze = _to_grid(x, conv.grid)
    return _from_grid(depthwise_conv2d(g, conv.kernel), squeeze)


def conv_mixing_oamix(x: Tensor, conv: ConvMixing, mask: ReweightMask) -> Tensor:
    """``(M * W_linear) @ x_flat`` per channel, evaluated tap by tap.

    Each kernel tap at output patch ``p`` is scaled by ``M[p, neighbour(p)]``,
    i.e. the nonzero entries of the masked Toeplitz matrix.
    """
    g, squeeze = _to_grid(x, conv.grid)
    b = g.shape[0]
    n = conv.n_tokens
    s = conv.kernel_size
    m = mask.m
    if mask.has_cls or m.shape[-1] != n or m.shape[-2] != n:
        raise DimensionError(f"conv mixing needs an {n}x{n} mask, got {m.shape}")
    if m.ndim == 2:
        m = reshape(m, (1, n, n))
    if m.shape[0] != b:
        m = broadcast_to(m, (b, n, n))
    nb, _ = _tap_neighbours(conv.grid, s)
    flat_idx = np.arange(n)[None, :] * n + nb
    taps = take_last(reshape(m, (b, n * n)), flat_idx)
    taps = reshape(taps, (b, s * s) + tuple(conv.grid))
    return _from_grid(depthwise_conv2d(g, conv.kernel, taps), squeeze)


# -- channel mixing and blocks -------------------------------------------------
class ChannelMLP(Module):
    def __init__(self, dim: int, rng, dtype=np.float32, prefix: str = "", hidden: int | None = None,
                 activation: Callable[[Tensor], Tensor] = gelu):
        super().__init__(prefix)
        hidden = hidden or 4 * dim
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng, dtype, self._name("fc1")))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng, dtype, self._name("fc2")))
        self.activation = activation


def channel_mlp(x: Tensor, mlp: ChannelMLP) -> Tensor:
    return mlp.fc2(mlp.activation(mlp.fc1(x)))


class Block(Module):
    """Pre-norm residual block: ``x + mix(LN(x))`` then ``+ channel_mlp(LN(.))``."""

    def __init__(self, kind: str, dim: int, rng, *, index: int = 0, dtype=np.float32,
                 heads: int = 4, n_tokens: int | None = None, token_hidden: int = 32,
                 grid: tuple[int, int] | None = None, kernel_size: int = 3,
                 shared_kernel: bool = True, oamix: bool = False, has_cls: bool = False):
        if kind not in KINDS:
            raise ConfigError(f"unknown block kind {kind!r}; expected one of {KINDS}")
        super().__init__(f"blocks.{index}")
        self.kind = kind
        self.index = index
        self.has_cls = has_cls
        self.norm1 = self.add_child("norm1", LayerNorm(dim, dtype, self._name("norm1")))
        if kind == ATTENTION:
            mixer = AttentionLayer(dim, heads, rng, dtype, self._name("mixer"))
        elif kind == TOKEN_MLP:
            if n_tokens is None:
                raise ConfigError("token-MLP block needs n_tokens")
            mixer = TokenMLP(n_tokens, token_hidden, rng, dtype, self._name("mixer"))
        else:
            if grid is None:
                raise ConfigError("conv block needs the patch grid")
            mixer = ConvMixing(grid, kernel_size, dim, rng, dtype, self._name("mixer"), shared_kernel)
        self.mixer = self.add_child("mixer", mixer)
        self.norm2 = self.add_child("norm2", LayerNorm(dim, dtype, self._name("norm2")))
        self.mlp = self.add_child("mlp", ChannelMLP(dim, rng, dtype, self._name("mlp")))
        self.kappa: MaskScale | None = None
        if oamix:
            self.kappa = MaskScale(index, dtype, self._name("kappa"))
            self._params["kappa"] = self.kappa.raw

    @property
    def oamix(self) -> bool:
        return self.kappa is not None

    def mask(self, distances) -> ReweightMask:
        m = build_mask(distances, self.kappa)
        return augment_cls(m) if self.has_cls else m

    def mix(self, h: Tensor, mask: ReweightMask | None) -> Tensor:
        if self.kind == ATTENTION:
            return attention_vanilla(h, self.mixer) if mask is None else attention_oamix(h, self.mixer, mask)
        if self.kind == TOKEN_MLP:
            return token_mlp_vanilla(h, self.mixer) if mask is None else token_mlp_oamix(h, self.mixer, mask)
        return conv_mixing_vanilla(h, self.mixer) if mask is None else conv_mixing_oamix(h, self.mixer, mask)

    def __call__(self, x: Tensor, distances=None) -> Tensor:
        return block_forward(self, x, distances)


def block_forward(block: Block, x: Tensor, distances=None) -> Tensor:
    """Run one block; OAMixed blocks rebuild their mask from ``distances`` and kappa."""
    if block.oamix and distances is None:
        raise ConfigError(f"block {block.index} is object-aware and needs patch distances")
    if not block.oamix and distances is not None:
        raise ConfigError(f"block {block.index} is vanilla; distances are not accepted")
    mask = block.mask(distances) if block.oamix else None
    x = add(x, block.mix(block.norm1(x), mask))
    return add(x, channel_mlp(block.norm2(x), block.mlp))
