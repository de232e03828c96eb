"""Dynamic fusion of the spatio-temporal and multi-modal feature rows.

A per-row sigmoid gate (squeeze-style two-layer perceptron) scores every
row of the concatenated feature stack; scaled rows are mean-pooled and a
single affine map produces the forgery logit.  The sigmoid that turns the
logit into a probability lives inside the training loss.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import WidthMismatch
from .layers import Linear
from .rng import CounterRng


class FusionHead:
    def __init__(self, dim: int, gate_hidden: int = 16, seed: int = 0):
        rng = CounterRng(seed).derive("fusion")
        self.dim = dim
        self.gate_fc1 = Linear(rng, "gate.fc1", dim, gate_hidden)
        self.gate_fc2 = Linear(rng, "gate.fc2", gate_hidden, 1, zero=True)
        self.classifier = Linear(rng, "classifier", dim, 1, zero=True)

    def gate(self, rows: Tensor) -> Tensor:
        """Pre-sigmoid gate score per row: (..., R, 1)."""
        return self.gate_fc2(ad.relu(self.gate_fc1(rows)))

    def params(self) -> dict[str, Tensor]:
        return {**self.gate_fc1.params(), **self.gate_fc2.params(),
                **self.classifier.params()}


def _check_width(t: Tensor, dim: int, name: str):
    if t.shape[-1] != dim:
        raise WidthMismatch(f"{name} width {t.shape[-1]} != fusion width {dim}")


def dynamic_weights(f_st: Tensor, f_m: Optional[Tensor], head: FusionHead) -> Tensor:
    """Sigmoid gate value per row of CONCAT(f_st, f_m): (..., N+M) in (0,1)."""
    _check_width(f_st, head.dim, "spatio-temporal rows")
    rows = f_st
    if f_m is not None:
        _check_width(f_m, head.dim, "multi-modal rows")
        rows = ad.concat([f_st, f_m], axis=-2)
    w = ad.sigmoid(head.gate(rows))
    return w.reshape(w.shape[:-1])


def refine_and_fuse(f_st: Tensor, f_m: Optional[Tensor], w: Tensor) -> Tensor:
    """Scale each row by its gate weight and stack: (..., N+M, D)."""
    rows = f_st if f_m is None else ad.concat([f_st, f_m], axis=-2)
    if w.shape != rows.shape[:-1]:
        raise WidthMismatch(f"weights {w.shape} do not match rows {rows.shape[:-1]}")
    return ad.mul(rows, w.reshape(w.shape + (1,)))


def predict(f_0: Tensor, head: FusionHead) -> Tensor:
    """Mean-pool rows and apply the classifier: logits shaped (...,)."""
    _check_width(f_0, head.dim, "fused rows")
    pooled = f_0.mean(axis=-2)
    if pooled.ndim == 1:
        s = head.classifier(pooled.reshape(1, head.dim))
        return s.reshape(())
    s = head.classifier(pooled)
    return s.reshape(s.shape[:-1])
