"""End-to-end detector training.

Trainable set: the attention backbone, the two feature projections, and
the fusion head.  The VQ-VAE and the feature providers stay frozen.  All
randomness flows through one counter stream whose state rides in the
checkpoint, so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import evaluate
from .autodiff import Tensor
from .checkpoint import (decode_text, decode_u64, encode_text, encode_u64,
                         load_checkpoint, match_tensors, save_checkpoint)
from .config import TrainConfig, config_from_echo, render_config
from .corpus import LoadedCorpus, VideoClip
from .errors import (InvalidCombination, NonFiniteLoss, SingleClassCorpus,
                     VideoTooShort)
from .fusion import FusionHead, dynamic_weights, predict, refine_and_fuse
from .iafa import IafaConfig, IafaModel
from .mmfr import (FileProvider, MmfrProjector, MockConfig, MockProvider,
                   project_batch)
from .optim import AdamState, adam_step
from .rng import CounterRng, derive_seed
from .vqvae import VqVaeModel


def bce_loss(s: Tensor, y) -> Tensor:
    """Mean binary cross-entropy between logits and {0,1} targets."""
    return ad.bce_with_logits(s, y).mean()


def sample_clip(video: VideoClip, clip_len: int, rng: CounterRng,
                crop: Optional[int] = None) -> VideoClip:
    """Uniform contiguous window plus center crop, driven by the stream."""
    frames, _ = sample_window(video, clip_len, rng, crop)
    return VideoClip(frames, id=video.id, label=video.label, fps=video.fps)


def sample_window(video: VideoClip, clip_len: int, rng: CounterRng,
                  crop: Optional[int] = None) -> tuple[np.ndarray, int]:
    n = video.n_frames
    if n < clip_len:
        raise VideoTooShort(f"{video.id}: {n} frames < clip_len {clip_len}")
    start = rng.randint(n - clip_len + 1)
    frames = video.frames[start:start + clip_len]
    if crop is not None:
        frames = center_crop(frames, crop)
    return frames, start


def center_crop(frames: np.ndarray, crop: int) -> np.ndarray:
    h, w = frames.shape[1], frames.shape[2]
    if h < crop or w < crop:
        raise VideoTooShort(f"frames {h}x{w} smaller than crop {crop}")
    top = (h - crop) // 2
    left = (w - crop) // 2
    return frames[:, top:top + crop, left:left + crop, :]


# --- the composite detector -----------------------------------------------------


class Detector:
    """Attention backbone + feature projections + fusion head.

    Module toggles: ``use_recon`` feeds the VQ-VAE reconstruction as the
    second input channel set (otherwise the frame itself); ``use_mmfr``
    attaches the projected multi-modal rows; ``use_fusion`` applies the
    gate (otherwise rows pass unweighted).  Base-attention mode is part of
    the IafaConfig.
    """

    def __init__(self, cfg: TrainConfig, mode: str = "iafa"):
        if cfg.use_fusion and not cfg.use_mmfr:
            raise InvalidCombination("fusion requires mmfr")
        self.cfg = cfg
        self.iafa_cfg = IafaConfig(layers=cfg.layers, heads=cfg.heads, dim=cfg.dim,
                                   patch=cfg.patch, n_max=cfg.n_max,
                                   frame_size=cfg.crop, backbone=cfg.backbone,
                                   mlp_ratio=cfg.mlp_ratio, mode=mode)
        self.iafa = IafaModel(self.iafa_cfg, seed=derive_seed(cfg.seed, "detector"))
        self.projector = (MmfrProjector(cfg.dim, seed=derive_seed(cfg.seed, "detector"))
                          if cfg.use_mmfr else None)
        self.fusion = FusionHead(cfg.dim, gate_hidden=cfg.gate_hidden,
                                 seed=derive_seed(cfg.seed, "detector"))

    def forward(self, frames: np.ndarray, recon: Optional[np.ndarray],
                records: Optional[list]) -> Tensor:
        """(B, N, H, W, C) clips -> (B,) logits."""
        second = recon if self.cfg.use_recon else frames
        feats = self.iafa.forward(frames, second)  # (B, N|1, D)
        f_m = None
        if self.cfg.use_mmfr:
            f_m = project_batch(records, self.projector)  # (B, 65, D)
        if self.cfg.use_fusion:
            w = dynamic_weights(feats, f_m, self.fusion)
            fused = refine_and_fuse(feats, f_m, w)
        else:
            fused = feats if f_m is None else ad.concat([feats, f_m], axis=-2)
        return predict(fused, self.fusion)

    def trainable_params(self) -> dict[str, Tensor]:
        out = {f"iafa.{k}": v for k, v in self.iafa.params().items()}
        if self.projector is not None:
            out.update({f"proj.{k}": v for k, v in self.projector.params().items()})
        fusion = self.fusion.params()
        if not self.cfg.use_fusion:
            fusion = {k: v for k, v in fusion.items() if not k.startswith("gate.")}
        out.update({f"fusion.{k}": v for k, v in fusion.items()})
        return out


# --- providers / caches -------------------------------------------------------------


def make_provider(cfg: TrainConfig):
    if cfg.provider == "mock":
        return MockProvider(MockConfig(seed=cfg.seed, signal_strength=cfg.sigma),
                            interval_s=cfg.interval_s)
    return FileProvider(cfg.features, interval_s=cfg.interval_s)


def build_recon_cache(vqvae: VqVaeModel, corpus: LoadedCorpus,
                      ids: Optional[set[str]] = None) -> dict[str, np.ndarray]:
    """Frozen per-video reconstructions, computed once per corpus."""
    cache: dict[str, np.ndarray] = {}
    for vid, clip in corpus.clips.items():
        if ids is not None and vid not in ids:
            continue
        cache[vid] = vqvae.reconstruct_frames(clip.frames)
    return cache


# --- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_state: dict[str, np.ndarray]
    best_state: dict[str, np.ndarray]
    best_val_auc: float
    metrics: list[tuple[int, float, Optional[float]]]  # (step, loss, val_auc)
    detector: Detector
    losses: list[float] = field(default_factory=list)


def split_train_val(corpus: LoadedCorpus, cfg: TrainConfig):
    """Deterministic stratified 9:1 split of the train entries."""
    items = [(e, corpus.clips[Path(e.path).stem]) for e in corpus.entries
             if e.split == "train"]
    if not items:
        raise SingleClassCorpus("no train-split entries in corpus")
    if {e.label for e, _ in items} != {"real", "fake"}:
        raise SingleClassCorpus(
            f"train split holds one class: {sorted({e.label for e, _ in items})}")
    rng = CounterRng(derive_seed(cfg.seed, "split"))
    train_items, val_items = [], []
    for label in ("real", "fake"):
        part = [it for it in items if it[0].label == label]
        if len(part) < 2:
            raise SingleClassCorpus(f"need >= 2 {label} train clips, got {len(part)}")
        perm = rng.derive(label).shuffled(len(part))
        n_val = max(1, round(len(part) * (1.0 - cfg.train_fraction)))
        val_items += [part[i] for i in perm[:n_val]]
        train_items += [part[i] for i in perm[n_val:]]
    return train_items, val_items


def _assemble_batch(items, picks, cfg: TrainConfig, rng: CounterRng,
                    recon_cache, provider):
    xs, rs, ys, records = [], [], [], []
    for i in picks:
        entry, clip = items[int(i)]
        frames, start = sample_window(clip, cfg.clip_len, rng, cfg.crop)
        xs.append(frames)
        if cfg.use_recon:
            rs.append(center_crop(recon_cache[clip.id][start:start + cfg.clip_len],
                                  cfg.crop))
        ys.append(1.0 if entry.label == "fake" else 0.0)
        if cfg.use_mmfr:
            t_mid = (start + cfg.clip_len / 2.0) / clip.fps
            records.append(provider.for_clip(clip.id, entry.label, t_mid,
                                             clip.duration_s))
    x = np.stack(xs)
    r = np.stack(rs) if cfg.use_recon else None
    return x, r, np.array(ys, dtype=np.float32), (records if cfg.use_mmfr else None)


def collect_state(detector: Detector, vqvae: Optional[VqVaeModel], opt: AdamState,
                  rng: CounterRng, step: int, cfg: TrainConfig) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for name, p in detector.trainable_params().items():
        state[f"det.{name}"] = p.data.copy()
    if vqvae is not None:
        for name, p in vqvae.params().items():
            state[f"vqvae.{name}"] = p.data.copy()
    for name, m in opt.m.items():
        state[f"opt.m.{name}"] = m.copy()
        state[f"opt.v.{name}"] = opt.v[name].copy()
    state["__opt_t__"] = np.array([opt.t], dtype=np.float32)
    state["__step__"] = np.array([step], dtype=np.float32)
    state["__rng__"] = encode_u64(rng.seed, rng.counter)
    state["__config__"] = encode_text(render_config(cfg))
    if vqvae is not None:
        state["__vqvae_config__"] = encode_text(vqvae.cfg.render())
    return state


def state_shapes(detector: Detector, vqvae: Optional[VqVaeModel],
                 with_opt: bool) -> dict[str, tuple]:
    expected: dict[str, tuple] = {}
    params = detector.trainable_params()
    for name, p in params.items():
        expected[f"det.{name}"] = p.shape
    if vqvae is not None:
        for name, p in vqvae.params().items():
            expected[f"vqvae.{name}"] = p.shape
    if with_opt:
        for name, p in params.items():
            expected[f"opt.m.{name}"] = p.shape
            expected[f"opt.v.{name}"] = p.shape
        expected["__opt_t__"] = (1,)
    expected["__step__"] = (1,)
    expected["__rng__"] = (8,)
    expected["__config__"] = None  # free-length
    if vqvae is not None:
        expected["__vqvae_config__"] = None
    return expected


def restore_state(state: dict[str, np.ndarray], detector: Detector,
                  vqvae: Optional[VqVaeModel], opt: Optional[AdamState]
                  ) -> tuple[int, tuple[int, int]]:
    """Copy a checkpoint state into live objects; returns (step, rng state).

    Optimizer tensors are matched whenever the file carries them but only
    restored when an AdamState is supplied (evaluation ignores them).
    """
    has_opt = "__opt_t__" in state
    expected = state_shapes(detector, vqvae, with_opt=has_opt)
    free_len = {k for k, v in expected.items() if v is None}
    match_tensors({k: v for k, v in state.items() if k not in free_len},
                  {k: v for k, v in expected.items() if v is not None})
    params = detector.trainable_params()
    for name, p in params.items():
        p.data[:] = state[f"det.{name}"]
    if vqvae is not None:
        for name, p in vqvae.params().items():
            p.data[:] = state[f"vqvae.{name}"]
    if opt is not None and has_opt:
        for name, p in params.items():
            opt.ensure(name, p.shape, p.data.dtype)
            opt.m[name][:] = state[f"opt.m.{name}"]
            opt.v[name][:] = state[f"opt.v.{name}"]
        opt.t = int(state["__opt_t__"][0])
    step = int(state["__step__"][0])
    seed, counter = decode_u64(state["__rng__"])
    return step, (seed, counter)


def load_detector(path: str | Path) -> tuple[Detector, Optional[VqVaeModel], TrainConfig]:
    """Rebuild a detector (and its frozen VQ-VAE) from a checkpoint file."""
    state = load_checkpoint(path)
    cfg = config_from_echo(decode_text(state["__config__"]))
    mode = "base" if not any(k.startswith("det.iafa.layer0.frame")
                             for k in state) else "iafa"
    detector = Detector(cfg, mode=mode)
    vqvae = None
    if "__vqvae_config__" in state:
        from .vqvae import VqVaeConfig
        vqvae = VqVaeModel(VqVaeConfig.parse(decode_text(state["__vqvae_config__"])))
    restore_state(state, detector, vqvae, opt=None)
    return detector, vqvae, cfg


def train(cfg: TrainConfig, corpus: LoadedCorpus, vqvae: Optional[VqVaeModel],
          provider=None, recon_cache: Optional[dict] = None,
          resume_from: Optional[dict] = None, mode: str = "iafa",
          quiet: bool = True) -> TrainResult:
    """Stage-2 optimization of the detector; returns final and best states."""
    cfg.validate()
    if cfg.use_recon and vqvae is None:
        raise InvalidCombination("reconstruction input needs a vqvae model")
    train_items, val_items = split_train_val(corpus, cfg)
    provider = provider or (make_provider(cfg) if cfg.use_mmfr else None)
    if cfg.use_recon and recon_cache is None:
        recon_cache = build_recon_cache(vqvae, corpus)

    detector = Detector(cfg, mode=mode)
    params = detector.trainable_params()
    opt = AdamState()
    rng = CounterRng(derive_seed(cfg.seed, "train-sampling"))
    start_step = 0
    if resume_from is not None:
        start_step, (seed, counter) = restore_state(resume_from, detector, vqvae, opt)
        rng = CounterRng(seed, counter)

    metrics: list[tuple[int, float, Optional[float]]] = []
    losses: list[float] = []
    best_auc = -1.0
    best_state: Optional[dict] = None

    for step in range(start_step, cfg.max_steps):
        picks = rng.randint(len(train_items), (cfg.batch_size,))
        x, r, y, records = _assemble_batch(train_items, picks, cfg, rng,
                                           recon_cache, provider)
        logits = detector.forward(x, r, records)
        loss = bce_loss(logits, y)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(f"training loss non-finite at step {step}")
        losses.append(value)
        ad.zero_grads(params.values())
        ad.backward(loss)
        adam_step(params, None, opt, lr=cfg.lr)

        val_auc = None
        done = step + 1 == cfg.max_steps
        if cfg.val_every and ((step + 1) % cfg.val_every == 0 or done):
            val_auc = evaluate.validation_auc(val_items, detector, vqvae, provider,
                                              cfg, recon_cache)
            if val_auc > best_auc:
                best_auc = val_auc
                best_state = collect_state(detector, vqvae, opt, rng, step + 1, cfg)
            if not quiet:
                print(f"step {step + 1} loss {value:.4f} val_auc {val_auc:.4f}")
        metrics.append((step + 1, value, val_auc))

    final_state = collect_state(detector, vqvae, opt, rng, cfg.max_steps, cfg)
    if best_state is None:
        best_state, best_auc = final_state, float("nan")
    return TrainResult(final_state=final_state, best_state=best_state,
                       best_val_auc=best_auc, metrics=metrics, detector=detector,
                       losses=losses)


def write_metrics_csv(metrics, path: str | Path):
    lines = ["step,loss,val_auc"]
    for step, loss, auc in metrics:
        lines.append(f"{step},{loss:.6f},{'' if auc is None else f'{auc:.6f}'}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
