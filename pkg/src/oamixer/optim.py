"""AdamW with per-parameter weight-decay groups."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only: not kappa, norms, biases or embeddings."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("kappa", "gamma", "beta", "bias", "bo", "pos_embed", "cls_token")


def is_kappa(name: str) -> bool:
    return name.rsplit(".", 1)[-1] == "kappa"


class AdamW:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05, kappa_lr_scale: float = 1.0):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.wd = [weight_decay if decays(p.name) else 0.0 for p in self.params]
        self.lr_scale = [kappa_lr_scale if is_kappa(p.name) else 1.0 for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v, wd, ls in zip(self.params, self.m, self.v, self.wd, self.lr_scale):
            g = p.grad if p.grad is not None else 0.0
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * np.square(g)
            if wd:
                p.data *= p.data.dtype.type(1 - self.lr * wd)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * ls * update).astype(p.data.dtype)
