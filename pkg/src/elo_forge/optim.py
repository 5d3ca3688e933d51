"""AdamW with decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float = 3e-4,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.1,
) -> AdamWState:
    """Update ``params`` in place for every name present in ``grads``.

    Decay is applied as ``w -= lr * wd * w`` before the bias-corrected Adam
    step. Moments are zero-initialised on first sight of a name.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        w = params[name].data
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        if m.shape != w.shape:
            raise ShapeError(f"{name}: optimizer state {m.shape} vs param {w.shape}")
        dt = w.dtype.type
        if weight_decay:
            w -= dt(lr * weight_decay) * w
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt(c2))
        denom += dt(eps)
        w -= dt(lr / c1) * m / denom
    return state


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total) / total))
