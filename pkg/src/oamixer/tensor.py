"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, records a closure that maps the output gradient to
input gradients. :func:`backward` walks the recorded graph in reverse
topological order (the per-forward tape) and accumulates gradients into
leaf tensors.

Broadcasting is deliberately narrow: a binary op is accepted only when the
result shape equals the shape of one operand, i.e. the other operand is a
scalar or expands along leading / size-1 axes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _raise_item(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _wrap_scalar(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shape(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} need two-sided broadcasting, which is unsupported"
        )
    return out


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, neg, scale."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op in binary:
        if b is None:
            raise ParameterError(f"elementwise {op!r} needs two operands")
        return binary[op](a, b)
    if op == "exp":
        return exp(a)
    if op == "neg":
        return neg(a)
    if op == "scale":
        if b is None:
            raise ParameterError("elementwise 'scale' needs a scalar factor")
        return scale(a, float(b))
    raise ParameterError(f"unknown elementwise op {op!r}")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = half * x * (1 + t)

    def bw(g):
        du = c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def identity(a: Tensor) -> Tensor:
    return a


# -- reductions and reshaping ---------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = np.array(a.data[index], order="C")

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis with an integer index array of any shape."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    out = a.data[..., index]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        flat_g = g.reshape(shape[:-1] + (-1,))
        np.add.at(full, (..., index.reshape(-1)), flat_g)
        return (full,)

    return _make(out, (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, tuple(tensors), bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.array(np.broadcast_to(a.data, shape), order="C")
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- normalisations --------------------------------------------------------
def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {a.shape}")
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


DENOM_FLOOR = 1e-12


def masked_softmax(logits: Tensor, mask: Tensor) -> Tensor:
    """Row-renormalised ``mask * softmax(logits)``.

    Computed as ``m*e / sum(m*e)`` with ``e = exp(logits - rowmax)``; the
    softmax normaliser cancels, so an all-ones mask reproduces
    :func:`softmax_lastdim` bit for bit. The denominator is floored (not
    offset) to keep that identity exact.
    """
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {logits.shape}")
    _binary_shape("masked_softmax", logits, mask)
    x, m = logits.data, mask.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    w = m * e
    denom = np.maximum(w.sum(axis=-1, keepdims=True), x.dtype.type(DENOM_FLOOR))
    out = w / denom

    def bw(g):
        inner = g - (g * out).sum(axis=-1, keepdims=True)
        gx = out * inner
        gm = (e / denom) * inner
        return gx, _unbroadcast(gm, m.shape)

    return _make(out, (logits, mask), bw, "masked_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _make(out, (a, gamma, beta), bw, "layer_norm")


# -- convolution -----------------------------------------------------------
def depthwise_conv2d(x: Tensor, kernel: Tensor, tap_scale: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded, same-size depthwise convolution.

    ``x`` is ``[C,H,W]`` or ``[B,C,H,W]``; ``kernel`` is ``[1,S,S]`` (shared
    over channels) or ``[C,S,S]``. The optional ``tap_scale`` of shape
    ``[B,S*S,H,W]`` multiplies each kernel tap per output position, which is
    how a reweighting mask enters the convolution. Taps are summed in fixed
    row-major order.
    """
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"depthwise_conv2d expects [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
        raise DimensionError(f"kernel must be [1|C, S, S], got {kernel.shape}")
    s = kernel.shape[-1]
    if s % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {s}")
    xd = x.data[None] if unbatched else x.data
    b, c, h, w = xd.shape
    if kernel.shape[0] not in (1, c):
        raise DimensionError(f"kernel channel dim {kernel.shape[0]} must be 1 or {c}")
    r = s // 2
    kd = kernel.data
    sd = None
    if tap_scale is not None:
        sd = tap_scale.data
        if sd.shape != (b, s * s, h, w):
            raise DimensionError(f"tap_scale must be {(b, s * s, h, w)}, got {sd.shape}")
    xp = np.zeros((b, c, h + 2 * r, w + 2 * r), dtype=xd.dtype)
    xp[:, :, r:r + h, r:r + w] = xd
    out = None
    for t in range(s * s):
        i, j = divmod(t, s)
        coef = kd[:, i, j][:, None, None]
        if sd is not None:
            coef = coef * sd[:, t][:, None]
        term = coef * xp[:, :, i:i + h, j:j + w]
        out = term if out is None else out + term
    out = np.ascontiguousarray(np.broadcast_to(out, (b, c, h, w)))

    def bw(g):
        gb = g[None] if unbatched else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        gs = None if sd is None else np.zeros_like(sd)
        for t in range(s * s):
            i, j = divmod(t, s)
            window = xp[:, :, i:i + h, j:j + w]
            k_t = kd[:, i, j][:, None, None]
            coef = k_t if sd is None else k_t * sd[:, t][:, None]
            gxp[:, :, i:i + h, j:j + w] += gb * coef
            gw = gb * window
            if gs is not None:
                gs[:, t] = (gw * k_t).sum(axis=1)
                gw = gw * sd[:, t][:, None]
            per_channel = gw.sum(axis=(0, 2, 3))
            gk[:, i, j] = per_channel.sum() if kd.shape[0] == 1 else per_channel
        gx = gxp[:, :, r:r + h, r:r + w]
        if unbatched:
            gx = gx[0]
        grads = [gx, gk]
        if tap_scale is not None:
            grads.append(gs)
        return tuple(grads)

    parents = (x, kernel) if tap_scale is None else (x, kernel, tap_scale)
    return _make(out[0] if unbatched else out, parents, bw, "depthwise_conv2d")


# -- losses ----------------------------------------------------------------
def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of ``[B, K]`` logits against integer targets."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    bsz = logits.shape[0]
    if t.shape != (bsz,):
        raise DimensionError(f"targets shape {t.shape} does not match batch {bsz}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(bsz)
    loss = (lse - shifted[rows, t]).mean()

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1
        return (p * (g / bsz),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


# -- reverse pass ----------------------------------------------------------
def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params``, when given, are zero-initialised first if they have no
    gradient buffer yet, so unreachable parameters end with a zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
