"""Deterministic width adapters.

The feature file pins widths 1024 (pooled vision) and 4096 (LM hidden).
At paper scale (CLIP-L/336 + a 4096-wide decoder) the adapters are exact
identities; for other backbones a fixed seeded linear map lifts the native
width so the file contract never changes.  The map is frozen (inference
only) and fully reproducible from the config seed.
"""

from __future__ import annotations

import numpy as np
import torch


def _seeded_matrix(src: int, dst: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFF)
    return torch.randn(src, dst, generator=gen) / float(np.sqrt(src))


class DimAdapter:
    def __init__(self, src: int, dst: int, seed: int):
        self.src = src
        self.dst = dst
        self.matrix = None if src == dst else _seeded_matrix(src, dst, seed)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.matrix is None:
            return x
        return x @ self.matrix


class VisualTokenProjector:
    """Maps vision-encoder token states into the LM embedding space.

    Stands in for the trained multimodal projector of a full checkpoint;
    with real weights a trained projector should be loaded instead.
    """

    def __init__(self, vision_dim: int, lm_dim: int, seed: int):
        self.matrix = _seeded_matrix(vision_dim, lm_dim, seed ^ 0x50524F4A)

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens @ self.matrix
