"""VQ-VAE used for frame reconstruction and residual trace amplification.

The reconstruction residual (input minus decoded output) is larger for
natural frames than for frames that already passed through a learned
generative decoder; the detector feeds on that asymmetry.  The same model
also synthesizes the fake half of the corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import (DimensionMismatch, EmptyCorpus, NonFiniteLoss,
                     ShapeMismatch, ShapeNotDivisible)
from .layers import Conv2d
from .optim import AdamState, adam_step
from .rng import CounterRng


@dataclass
class VqVaeConfig:
    in_channels: int = 3
    channels: tuple[int, int] = (16, 32)  # widths of the two stride-2 convs
    latent_dim: int = 16                  # paper scale: 256
    codebook_size: int = 64               # paper scale: 512
    beta: float = 0.25                    # commitment weight
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 1200
    seed: int = 0

    @property
    def downsample(self) -> int:
        return 2 ** len(self.channels)

    def render(self) -> str:
        return (f"in_channels={self.in_channels}\n"
                f"channels={','.join(str(c) for c in self.channels)}\n"
                f"latent_dim={self.latent_dim}\ncodebook_size={self.codebook_size}\n"
                f"beta={self.beta}\nlr={self.lr}\nbatch_size={self.batch_size}\n"
                f"max_steps={self.max_steps}\nseed={self.seed}\n")

    @classmethod
    def parse(cls, text: str) -> "VqVaeConfig":
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key == "channels":
                kw[key] = tuple(int(c) for c in raw.split(","))
            elif key in ("beta", "lr"):
                kw[key] = float(raw)
            else:
                kw[key] = int(raw)
        return cls(**kw)


class Codebook:
    """K x d table of latent embeddings with usage counters."""

    def __init__(self, rng: CounterRng, size: int, dim: int, scale: float = 0.5):
        if size < 2:
            raise ValueError(f"codebook needs >= 2 entries, got {size}")
        self.entries = Tensor(rng.derive("codebook").normal((size, dim), scale),
                              requires_grad=True)
        self.usage_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0


def quantize(latents: Tensor, codebook: Codebook) -> tuple[np.ndarray, Tensor]:
    """Snap each latent vector to its nearest codebook entry (L2).

    Ties break toward the lowest index.  The returned tensor carries the
    straight-through gradient: backward copies it to ``latents`` verbatim.
    Every call increments the codebook usage counters.
    """
    if latents.shape[-1] != codebook.dim:
        raise DimensionMismatch(
            f"latent dim {latents.shape[-1]} vs codebook dim {codebook.dim}")
    flat = latents.data.reshape(-1, codebook.dim)
    e = codebook.entries.data
    d2 = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * flat @ e.T + (e * e).sum(axis=1)
    indices = np.argmin(d2, axis=1)
    codebook.usage_counts += np.bincount(indices, minlength=codebook.size)
    indices = indices.reshape(latents.shape[:-1])
    quantized = ad.substitute(latents, codebook.entries.data[indices])
    return indices, quantized


class VqVaeModel:
    """Strided conv encoder, nearest-codebook quantizer, mirrored decoder."""

    def __init__(self, cfg: VqVaeConfig):
        self.cfg = cfg
        rng = CounterRng(cfg.seed).derive("vqvae")
        c1, c2 = cfg.channels
        d = cfg.latent_dim
        self.enc1 = Conv2d(rng, "enc.conv1", cfg.in_channels, c1, k=4, stride=2, pad=1)
        self.enc2 = Conv2d(rng, "enc.conv2", c1, c2, k=4, stride=2, pad=1)
        self.enc3 = Conv2d(rng, "enc.conv3", c2, d, k=3, stride=1, pad=1)
        self.dec1 = Conv2d(rng, "dec.conv1", d, c2, k=3, stride=1, pad=1)
        self.dec2 = Conv2d(rng, "dec.conv2", c2, c1, k=4, stride=2, pad=1, transpose=True)
        self.dec3 = Conv2d(rng, "dec.conv3", c1, cfg.in_channels, k=4, stride=2, pad=1,
                           transpose=True)
        self.codebook = Codebook(rng, cfg.codebook_size, d)

    def encode(self, frames: Tensor) -> Tensor:
        h = ad.relu(self.enc1(frames))
        h = ad.relu(self.enc2(h))
        return self.enc3(h)

    def decode(self, latents: Tensor) -> Tensor:
        h = ad.relu(self.dec1(latents))
        h = ad.relu(self.dec2(h))
        return ad.sigmoid(self.dec3(h))

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
        """encode -> quantize -> decode; returns (recon, latents, indices)."""
        z = self.encode(frames)
        indices, q = quantize(z, self.codebook)
        return self.decode(q), z, indices

    def check_input_shape(self, h: int, w: int):
        f = self.cfg.downsample
        if h % f or w % f:
            raise ShapeNotDivisible(f"frame {h}x{w} not divisible by factor {f}")

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m in (self.enc1, self.enc2, self.enc3, self.dec1, self.dec2, self.dec3):
            out.update(m.params())
        out["codebook.entries"] = self.codebook.entries
        return out

    def reconstruct_frames(self, frames: np.ndarray) -> np.ndarray:
        """Inference-only framewise reconstruction, clamped to [0, 1]."""
        self.check_input_shape(frames.shape[1], frames.shape[2])
        with no_grad():
            recon, _, _ = self.forward(Tensor(frames, dtype=None))
        return np.clip(recon.data, 0.0, 1.0)


def save_vqvae(model: VqVaeModel, path):
    from .checkpoint import encode_text, save_checkpoint

    state = {f"vqvae.{k}": p.data.copy() for k, p in model.params().items()}
    state["__vqvae_config__"] = encode_text(model.cfg.render())
    save_checkpoint(state, path)


def load_vqvae(path) -> VqVaeModel:
    from .checkpoint import decode_text, load_checkpoint, match_tensors

    state = load_checkpoint(path)
    cfg = VqVaeConfig.parse(decode_text(state["__vqvae_config__"]))
    model = VqVaeModel(cfg)
    expected = {f"vqvae.{k}": p.shape for k, p in model.params().items()}
    match_tensors({k: v for k, v in state.items() if k != "__vqvae_config__"},
                  expected)
    for k, p in model.params().items():
        p.data[:] = state[f"vqvae.{k}"]
    return model


@dataclass
class Residual:
    """Per-frame difference between a frame and its reconstruction."""

    diff: np.ndarray
    energy: float


def residual_energies(frames: np.ndarray, recon: np.ndarray) -> list[Residual]:
    if frames.shape != recon.shape:
        raise ShapeMismatch(f"residual: {frames.shape} vs {recon.shape}")
    out = []
    for x, r in zip(frames, recon):
        diff = x - r
        out.append(Residual(diff=diff, energy=float((diff * diff).mean())))
    return out


def vqvae_loss(model: VqVaeModel, batch: Tensor, beta: float
               ) -> tuple[Tensor, np.ndarray, dict[str, float]]:
    """Total training loss plus the indices and its three components."""
    z = model.encode(batch)
    indices, q = quantize(z, model.codebook)
    recon = model.decode(q)
    selected = ad.index_select(model.codebook.entries, indices)
    recon_term = ad.mul(ad.sub(recon, batch), ad.sub(recon, batch)).mean()
    codebook_term = ad.mul(ad.sub(selected, z.detach()),
                           ad.sub(selected, z.detach())).mean()
    commit_diff = ad.sub(z, selected.detach())
    commit_term = ad.mul(commit_diff, commit_diff).mean()
    loss = ad.add(ad.add(recon_term, codebook_term), ad.mul(commit_term, beta))
    parts = {"recon": recon_term.item(), "codebook": codebook_term.item(),
             "commit": commit_term.item()}
    return loss, indices, parts


def train_vqvae(frames: np.ndarray, cfg: VqVaeConfig,
                plateau_window: int = 100, plateau_tol: float = 1e-6,
                revive_every: int = 50) -> tuple[VqVaeModel, list[float]]:
    """Train on a frame set; returns the model and the loss curve.

    Loss = recon MSE + codebook term + beta * commitment term.  The
    codebook is seeded from encoder outputs on the first batch, and codes
    unused over a revival window are re-seeded from current latents so the
    book cannot collapse onto a handful of entries.  Training stops early
    once the trailing-window mean loss stops improving.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise EmptyCorpus(f"need a non-empty (M,H,W,C) frame set, got {frames.shape}")
    model = VqVaeModel(cfg)
    model.check_input_shape(frames.shape[1], frames.shape[2])
    params = model.params()
    state = AdamState()
    rng = CounterRng(cfg.seed)
    sampler = rng.derive("vqvae-batches")
    reviver = rng.derive("vqvae-revive")
    curve: list[float] = []
    beta = cfg.beta
    k = model.codebook.size

    def batch_latent_cells(idx) -> np.ndarray:
        with no_grad():
            z = model.encode(Tensor(frames[idx], dtype=None))
        return z.data.reshape(-1, model.codebook.dim)

    # seed codebook from data so every entry starts inside the latent cloud
    seed_idx = sampler.randint(frames.shape[0], (min(cfg.batch_size, frames.shape[0]),))
    cells = batch_latent_cells(seed_idx)
    pick = reviver.randint(cells.shape[0], (k,))
    model.codebook.entries.data[:] = cells[pick] + reviver.normal((k, model.codebook.dim), 0.01)

    usage_window = np.zeros(k, dtype=np.int64)
    for step in range(cfg.max_steps):
        idx = sampler.randint(frames.shape[0], (min(cfg.batch_size, frames.shape[0]),))
        batch = Tensor(frames[idx], dtype=None)
        loss, indices, _ = vqvae_loss(model, batch, beta)
        usage_window += np.bincount(indices.reshape(-1), minlength=k)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(f"vqvae loss non-finite at step {step}")
        curve.append(value)
        ad.zero_grads(params.values())
        ad.backward(loss)
        adam_step(params, None, state, lr=cfg.lr)
        if revive_every and (step + 1) % revive_every == 0:
            dead = np.flatnonzero(usage_window == 0)
            if dead.size:
                live = batch_latent_cells(idx)
                pick = reviver.randint(live.shape[0], (dead.size,))
                model.codebook.entries.data[dead] = live[pick]
                for name in ("codebook.entries",):
                    if name in state.m:
                        state.m[name][dead] = 0.0
                        state.v[name][dead] = 0.0
            usage_window[:] = 0
        if len(curve) >= 2 * plateau_window:
            recent = float(np.mean(curve[-plateau_window:]))
            prev = float(np.mean(curve[-2 * plateau_window:-plateau_window]))
            if prev - recent < plateau_tol * max(1.0, prev):
                break
    return model, curve
