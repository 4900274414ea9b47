"""Fast oracle and invariant checks runnable from the CLI without pytest."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .gradcheck import grad_check
from .labels import BINARY_SOFT, PixelLabelMap, decode_label_map, encode_label_map
from .layers import (
    ATTENTION,
    KINDS,
    AttentionLayer,
    Block,
    ConvMixing,
    TokenMLP,
    attention_weights,
    token_mlp_oamix,
    token_mlp_residual,
    token_mlp_vanilla,
    toeplitz_from_kernel,
)
from .mask import MaskScale, ReweightMask, build_mask
from .models import CONVMIXER, DEIT, MIXER, ModelConfig, build_model
from .serialization import decode_tensor, encode_tensor
from .tensor import Tensor, depthwise_conv2d, identity, matmul, softmax_lastdim

CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(name: str):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn

    return deco


@check("matmul matches triple loop")
def _matmul():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.array([[sum(a[i, t] * b[t, j] for t in range(4)) for j in range(2)] for i in range(3)])
    assert np.abs(matmul(Tensor(a), Tensor(b)).data - ref).max() <= 1e-12


@check("softmax rows sum to one")
def _softmax():
    x = np.random.default_rng(1).normal(scale=20, size=(50, 7))
    assert np.abs(softmax_lastdim(Tensor(x)).data.sum(-1) - 1).max() <= 1e-12


@check("Toeplitz form equals depthwise conv")
def _toeplitz():
    rng = np.random.default_rng(2)
    for gh, gw in [(1, 1), (4, 5), (6, 6), (3, 2)]:
        conv = ConvMixing((gh, gw), 3, 1, rng, np.float64)
        conv.kernel.data[...] = rng.normal(size=conv.kernel.shape)
        w = toeplitz_from_kernel(conv).data
        x = rng.normal(size=(1, gh, gw))
        direct = depthwise_conv2d(Tensor(x), conv.kernel).data.reshape(-1)
        assert np.abs(w @ x.reshape(-1) - direct).max() <= 1e-12


@check("mask law exp(-kappa d)")
def _mask():
    d = np.random.default_rng(3).random((5, 5))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0)
    k = MaskScale(0, np.float64)
    k.value = 0.7
    m = build_mask(d, k).m.data
    assert np.abs(m - np.exp(-0.7 * d)).max() <= 1e-12 and np.all(np.diag(m) == 1)


@check("masked attention is row-stochastic")
def _rows():
    rng = np.random.default_rng(4)
    layer = AttentionLayer(8, 2, rng, np.float64)
    x = Tensor(rng.normal(size=(3, 6, 8)))
    m = Tensor(rng.uniform(0.01, 1, size=(3, 6, 6)))
    a = attention_weights(x, layer, ReweightMask(m))
    assert np.abs(a.data.sum(-1) - 1).max() <= 1e-6


@check("feed-forward decomposition")
def _ff():
    rng = np.random.default_rng(5)
    mlp = TokenMLP(6, 10, rng, np.float64)
    x = Tensor(rng.normal(size=(6, 3)))
    ones = ReweightMask(Tensor(np.ones((6, 6))))
    assert np.abs(token_mlp_oamix(x, mlp, ones).data - token_mlp_vanilla(x, mlp).data).max() <= 1e-12
    mlp.activation = identity
    assert np.all(token_mlp_residual(x, mlp).data == 0)
    m = ReweightMask(Tensor(rng.uniform(0.1, 1, size=(6, 6))))
    lin = mlp.w2.data @ mlp.w1.data
    assert np.abs(token_mlp_oamix(x, mlp, m).data - (m.m.data * lin) @ x.data).max() <= 1e-12


@check("kappa=0 models equal vanilla bit for bit")
def _equiv():
    rng = np.random.default_rng(6)
    for fam in (DEIT, MIXER, CONVMIXER):
        kw = dict(family=fam, image_size=(16, 16), patch=4, dim=16, depth=2, heads=2, token_hidden=8)
        van = build_model(ModelConfig(**kw), seed=1)
        oam = build_model(ModelConfig(oamix=True, **kw), seed=1)
        imgs = rng.random((3, 3, 16, 16))
        y = rng.random((3, 16, 1))
        dist = np.abs(y - np.swapaxes(y, 1, 2))
        assert np.array_equal(van(imgs).data, oam(imgs, distances=dist).data), fam


@check("OAMixed block gradients (incl. kappa)")
def _grad():
    rng = np.random.default_rng(7)
    for kind in KINDS:
        blk = Block(kind, 8, rng, dtype=np.float64, heads=2, n_tokens=4, token_hidden=6,
                    grid=(2, 2), oamix=True, has_cls=kind == ATTENTION)
        blk.kappa.value = 0.8
        t = 5 if kind == ATTENTION else 4
        x = Tensor(rng.normal(size=(2, t, 8)))
        y = rng.random((2, 4, 1))
        d = np.abs(y - np.swapaxes(y, 1, 2))
        w = rng.normal(size=(2, t, 8))
        err = grad_check(lambda: (blk(x, d) * w).sum(), blk.parameters(), 1e-6, max_entries=6)
        assert err <= 1e-4, (kind, err)


@check("OAT1 / OAL1 round trip")
def _io():
    rng = np.random.default_rng(8)
    arr = rng.normal(size=(2, 3)).astype(np.float32)
    assert decode_tensor(encode_tensor(arr)).data.tobytes() == arr.tobytes()
    lm = PixelLabelMap(rng.random((4, 4, 1)).astype(np.float32), BINARY_SOFT)
    assert decode_label_map(encode_label_map(lm)).values.tobytes() == lm.values.tobytes()


def run_selftest(out=None) -> int:
    """Run every check, print one line each; return the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        detail = ""
        try:
            fn()
        except Exception as exc:  # report and continue
            detail = f"  {type(exc).__name__}: {exc}"
            failures += 1
        status = "FAIL" if detail else "PASS"
        print(f"{status}  {name}  [{time.perf_counter() - t0:.2f}s]{detail}", file=out)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=out)
    return failures
