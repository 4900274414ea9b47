"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DeterminismError, ParameterError
from .tensor import Tensor, backward


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and recomputes a scalar loss from the current
    values of ``params`` (which are perturbed in place and restored). The
    error per entry is ``|a - n| / max(1, |a|, |n|)``. ``max_entries``
    limits the number of probed entries per parameter to a seeded random
    subset.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        if p.dtype != np.float64:
            raise ParameterError(f"grad_check runs in float64; {getattr(p, 'name', p)} is {p.dtype}")

    base = f()
    again = f()
    if not np.array_equal(base.data, again.data):
        raise DeterminismError(f"f is not deterministic: {base.item()!r} vs {again.item()!r}")

    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(base)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga_flat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(ga_flat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
