"""Adam with bias correction, operating in place on :class:`Tensor` leaves."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update of every trainable tensor in ``params``; grads are cleared.

    Tensors with ``requires_grad=False`` are frozen and skipped.  A trainable
    tensor without a gradient is an error, since silently skipping it would
    desynchronise the moment estimates.
    """
    live = [p for p in params if p.requires_grad]
    for i, p in enumerate(live):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise ValueError(f"parameter {label} has no gradient")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in live:
        key = id(p)
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
