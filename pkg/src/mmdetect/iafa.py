"""In-and-across frame attention over patch tokens of a video clip.

Each layer runs two attentions: first a joint self-attention over every
patch token of every frame (global forgery patterns), then a per-frame
attention in which one frame-centric token per frame aggregates that
frame's patches (local patterns).  The stacked frame-centric tokens are
the spatio-temporal feature, one row per frame.

``base`` mode is the ablation baseline: a single class token joins the
flattened patch sequence and every layer is one standard self-attention
block, with the class token as the output feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ClipLongerThanNMax, ShapeMismatch
from .layers import Conv2d, Linear, TransformerBlock, init_param
from .rng import CounterRng

STEM_CHANNELS = (16, 32)  # widths of the two stride-2 stem convs
STEM_RF_MARGIN = 3        # pixels a conv-stem token sees beyond its own patch


@dataclass
class IafaConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch: int = 8
    n_max: int = 16
    frame_size: int = 32
    in_channels: int = 3          # per image; the tokenizer sees 2x (frame, recon)
    backbone: str = "conv-stem"   # conv-stem | linear-patch
    mlp_ratio: int = 2
    mode: str = "iafa"            # iafa | base

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeMismatch(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.frame_size % self.patch:
            raise ShapeMismatch(f"frame {self.frame_size} not divisible by patch {self.patch}")
        if self.backbone not in ("conv-stem", "linear-patch"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.mode not in ("iafa", "base"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backbone == "conv-stem" and self.patch % 4:
            raise ShapeMismatch("conv-stem downsamples by 4; patch must be a multiple of 4")

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid


def param_count(cfg: IafaConfig) -> int:
    """Closed-form trainable-parameter count for a given config."""
    d, h = cfg.dim, cfg.mlp_ratio * cfg.dim
    c2 = 2 * cfg.in_channels
    if cfg.backbone == "conv-stem":
        s1, s2 = STEM_CHANNELS
        stem = (4 * 4 * c2 * s1 + s1) + (4 * 4 * s1 * s2 + s2)
        proj_in = (cfg.patch // 4) ** 2 * s2
    else:
        stem = 0
        proj_in = cfg.patch * cfg.patch * c2
    proj = proj_in * d + d
    embeds = cfg.tokens_per_frame * d + cfg.n_max * d + d  # spatial + temporal + seed token
    mha = 4 * (d * d + d)
    block = mha + 2 * (2 * d) + (d * h + h) + (h * d + d)
    blocks_per_layer = 2 if cfg.mode == "iafa" else 1
    return stem + proj + embeds + cfg.layers * blocks_per_layer * block


class IafaModel:
    def __init__(self, cfg: IafaConfig, seed: int = 0):
        self.cfg = cfg
        rng = CounterRng(seed).derive("iafa")
        c2 = 2 * cfg.in_channels
        if cfg.backbone == "conv-stem":
            s1, s2 = STEM_CHANNELS
            self.stem1 = Conv2d(rng, "stem.conv1", c2, s1, k=4, stride=2, pad=1)
            self.stem2 = Conv2d(rng, "stem.conv2", s1, s2, k=4, stride=2, pad=1)
            self._seed_difference_filters()
            proj_in = (cfg.patch // 4) ** 2 * s2
        else:
            self.stem1 = self.stem2 = None
            proj_in = cfg.patch * cfg.patch * c2
        self.patch_proj = Linear(rng, "patch_proj", proj_in, cfg.dim)
        self.spatial_emb = init_param(rng, "spatial_emb",
                                      (cfg.tokens_per_frame, cfg.dim), scale=0.02)
        self.temporal_emb = init_param(rng, "temporal_emb", (cfg.n_max, cfg.dim), scale=0.02)
        self.seed_token = init_param(rng, "seed_token", (cfg.dim,), scale=0.02)
        hidden = cfg.mlp_ratio * cfg.dim
        self.blocks_across: list[TransformerBlock] = []
        self.blocks_frame: list[TransformerBlock] = []
        for i in range(cfg.layers):
            self.blocks_across.append(
                TransformerBlock(rng, f"layer{i}.across", cfg.dim, cfg.heads, hidden))
            if cfg.mode == "iafa":
                self.blocks_frame.append(
                    TransformerBlock(rng, f"layer{i}.frame", cfg.dim, cfg.heads, hidden))

    def _seed_difference_filters(self):
        """Point the first stem filters at frame/reconstruction differences.

        Channels 2c and 2c+1 start as +-(frame_c - recon_c) box taps, so the
        reconstruction-error statistic is available from step zero instead
        of waiting for random filters to rotate toward it (slow at the
        small-lr training budget).  All filters stay fully trainable.
        """
        c = self.cfg.in_channels
        w = self.stem1.w.data  # (4, 4, 2C, S1)
        amp = 0.5
        for ch in range(c):
            for sign_idx, sign in enumerate((1.0, -1.0)):
                out_ch = 2 * ch + sign_idx
                if out_ch >= w.shape[3]:
                    return
                w[:, :, :, out_ch] = 0.0
                w[1:3, 1:3, ch, out_ch] = sign * amp / 4.0
                w[1:3, 1:3, c + ch, out_ch] = -sign * amp / 4.0

    # --- stages -----------------------------------------------------------

    def tokenize(self, frames: np.ndarray, recon: np.ndarray) -> Tensor:
        """Channel-concatenate (frame, reconstruction) pairs into patch tokens.

        Returns (B, N, L, D).  With the conv stem, a token's receptive
        field is its own patch plus STEM_RF_MARGIN pixels on each side.
        """
        if frames.shape != recon.shape:
            raise ShapeMismatch(f"frame/recon shapes differ: {frames.shape} vs {recon.shape}")
        b, n, hh, ww, c = frames.shape
        cfg = self.cfg
        if hh != cfg.frame_size or ww != cfg.frame_size or c != cfg.in_channels:
            raise ShapeMismatch(
                f"expected {cfg.frame_size}x{cfg.frame_size}x{cfg.in_channels} frames, "
                f"got {hh}x{ww}x{c}")
        pair = np.concatenate([frames, recon], axis=-1)
        x = Tensor(pair.reshape(b * n, hh, ww, 2 * c), dtype=None)
        if cfg.backbone == "conv-stem":
            feat = ad.relu(self.stem2(ad.relu(self.stem1(x))))
            cell = cfg.patch // 4
        else:
            feat = x
            cell = cfg.patch
        g = cfg.grid
        ch = feat.shape[3]
        # (BN, g, cell, g, cell, ch) -> (BN, g, g, cell*cell*ch)
        feat = feat.reshape(b * n, g, cell, g, cell, ch).swapaxes(2, 3)
        feat = feat.reshape(b * n, g, g, cell * cell * ch)
        tokens = self.patch_proj(feat.reshape(b * n * g * g, cell * cell * ch))
        return tokens.reshape(b, n, g * g, cfg.dim)

    def _embed_tokens(self, tokens: Tensor) -> Tensor:
        b, n, l, d = tokens.shape
        if n > self.cfg.n_max:
            raise ClipLongerThanNMax(f"clip has {n} frames > n_max {self.cfg.n_max}")
        spatial = self.spatial_emb.reshape(1, 1, l, d)
        temporal = self.temporal_emb[:n].reshape(1, n, 1, d)
        return ad.add(ad.add(tokens, spatial), temporal)

    def add_embeddings(self, tokens: Tensor, fc: Tensor) -> tuple[Tensor, Tensor]:
        """Add shared spatial (per patch index) and temporal (per frame
        index) embeddings; the frame-centric tokens get the temporal part."""
        b, n, l, d = tokens.shape
        tokens = self._embed_tokens(tokens)
        fc = ad.add(fc, self.temporal_emb[:n].reshape(1, n, d))
        return tokens, fc

    def initial_fc(self, b: int, n: int) -> Tensor:
        """One frame-centric token per frame, tiled from the learned seed."""
        ones = Tensor(np.ones((b, n, 1), dtype=self.seed_token.dtype), dtype=None)
        return ad.matmul(ones, self.seed_token.reshape(1, self.cfg.dim))

    def across_frame_attention(self, layer: int, tokens: Tensor) -> Tensor:
        """Joint self-attention over all N*L patch tokens of the clip."""
        b, n, l, d = tokens.shape
        flat = tokens.reshape(b, n * l, d)
        out = self.blocks_across[layer](flat)
        return out.reshape(b, n, l, d)

    def in_frame_attention(self, layer: int, tokens: Tensor, fc: Tensor) -> Tensor:
        """Per-frame update of the frame-centric token against {itself} and
        the frame's patch tokens; patch tokens are read-only here."""
        b, n, l, d = tokens.shape
        query = fc.reshape(b, n, 1, d)
        kv = ad.concat([query, tokens], axis=2)  # (B, N, 1+L, D)
        out = self.blocks_frame[layer](query, kv)
        return out.reshape(b, n, d)

    def forward(self, frames: np.ndarray, recon: np.ndarray) -> Tensor:
        """Full stack; returns frame features (B, N, D), or (B, 1, D) in
        base mode where a single class token summarizes the clip."""
        tokens = self.tokenize(frames, recon)
        b, n, l, d = tokens.shape
        if self.cfg.mode == "base":
            cls = self.initial_fc(b, 1)
            tokens = self._embed_tokens(tokens)
            seq = ad.concat([cls, tokens.reshape(b, n * l, d)], axis=1)
            for block in self.blocks_across:
                seq = block(seq)
            return seq[:, 0:1, :]
        fc = self.initial_fc(b, n)
        tokens, fc = self.add_embeddings(tokens, fc)
        for layer in range(self.cfg.layers):
            tokens = self.across_frame_attention(layer, tokens)
            fc = self.in_frame_attention(layer, tokens, fc)
        return fc

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.stem1 is not None:
            out.update(self.stem1.params())
            out.update(self.stem2.params())
        out.update(self.patch_proj.params())
        out["spatial_emb"] = self.spatial_emb
        out["temporal_emb"] = self.temporal_emb
        out["seed_token"] = self.seed_token
        for blk in self.blocks_across:
            out.update(blk.params())
        for blk in self.blocks_frame:
            out.update(blk.params())
        return out
