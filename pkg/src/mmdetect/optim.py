"""Adam optimizer over named parameter tables."""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteGradient, ShapeMismatch


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0

    def ensure(self, name: str, shape: tuple, dtype):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=dtype)
            self.v[name] = np.zeros(shape, dtype=dtype)
        elif self.m[name].shape != shape:
            raise ShapeMismatch(f"adam state for {name!r}: {self.m[name].shape} vs {shape}")


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update, applied in name-ascending order.

    ``grads`` may be None, in which case each parameter's ``.grad`` buffer
    is used (missing grads count as zero).  Any non-finite gradient aborts
    the whole step before any parameter is touched.
    """
    names = sorted(params)
    resolved: dict[str, np.ndarray] = {}
    for name in names:
        p = params[name]
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad for {name!r}: {g.shape} vs param {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name!r}; step aborted")
        resolved[name] = g

    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in names:
        p = params[name]
        g = resolved[name]
        state.ensure(name, p.data.shape, p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
