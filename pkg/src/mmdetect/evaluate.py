"""Video-level scoring, exact AUC, multi-seed reporting, clustering probes,
and the module-toggle ablation runner."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .corpus import LoadedCorpus, VideoClip
from .errors import (DegenerateFeatures, InvalidCombination, SingleClass,
                     VideoTooShort)
from .rng import CounterRng, derive_seed

PAPER_SEEDS = (1, 100, 999, 1234, 9999)

ABLATION_FLAGS = ("recon", "iafa", "mmfr", "fusion")


@dataclass
class ScoreRow:
    video_id: str
    label: str
    score: float
    seed: int = 0
    perturbation: str = "none"
    generator: str = ""


@dataclass
class ScoreTable:
    rows: list[ScoreRow]

    def scores_labels(self) -> tuple[np.ndarray, np.ndarray]:
        scores = np.array([r.score for r in self.rows], dtype=np.float64)
        labels = np.array([1 if r.label == "fake" else 0 for r in self.rows])
        return scores, labels


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- scoring --------------------------------------------------------------------


def score_video(video: VideoClip, detector, vqvae, provider, clip_len: int,
                stride: Optional[int] = None, crop: Optional[int] = None,
                recon_frames: Optional[np.ndarray] = None) -> float:
    """Mean sigmoid score over sliding windows (default: non-overlapping)."""
    from .trainer import center_crop  # local to avoid an import cycle

    n = video.n_frames
    if n < clip_len:
        raise VideoTooShort(f"{video.id}: {n} frames < clip_len {clip_len}")
    stride = clip_len if stride is None else stride
    crop = crop if crop is not None else video.frames.shape[1]
    starts = list(range(0, n - clip_len + 1, stride))
    cfg = detector.cfg
    if cfg.use_recon and recon_frames is None:
        recon_frames = vqvae.reconstruct_frames(video.frames)
    xs, rs, records = [], [], []
    for s in starts:
        xs.append(center_crop(video.frames[s:s + clip_len], crop))
        if cfg.use_recon:
            rs.append(center_crop(recon_frames[s:s + clip_len], crop))
        if cfg.use_mmfr:
            t_mid = (s + clip_len / 2.0) / video.fps
            records.append(provider.for_clip(video.id, video.label, t_mid,
                                             video.duration_s))
    with no_grad():
        logits = detector.forward(np.stack(xs),
                                  np.stack(rs) if cfg.use_recon else None,
                                  records if cfg.use_mmfr else None)
    return float(_sigmoid(logits.data).mean())


def validation_auc(items, detector, vqvae, provider, cfg, recon_cache) -> float:
    scores, labels = [], []
    for entry, clip in items:
        rf = recon_cache.get(clip.id) if (recon_cache and cfg.use_recon) else None
        scores.append(score_video(clip, detector, vqvae, provider, cfg.clip_len,
                                  crop=cfg.crop, recon_frames=rf))
        labels.append(1 if entry.label == "fake" else 0)
    return auc_scores(np.array(scores), np.array(labels))


def score_split(corpus: LoadedCorpus, detector, vqvae, provider, cfg,
                split: str = "test", seed: int = 0,
                perturbation: str = "none",
                recon_cache: Optional[dict] = None) -> ScoreTable:
    rows = []
    for entry, clip in corpus.split(split):
        rf = recon_cache.get(clip.id) if (recon_cache and cfg.use_recon) else None
        s = score_video(clip, detector, vqvae, provider, cfg.clip_len,
                        crop=cfg.crop, recon_frames=rf)
        rows.append(ScoreRow(video_id=clip.id, label=entry.label, score=s,
                             seed=seed, perturbation=perturbation,
                             generator=entry.generator))
    return ScoreTable(rows)


# --- exact AUC ---------------------------------------------------------------------


def auc_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """Tie-aware exact AUC via average ranks.

    Equals the probability that a random fake outscores a random real,
    counting ties as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.isfinite(scores).all():
        raise SingleClass("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} fake / {n_neg} real")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    sum_pos = float(ranks[labels == 1].sum())
    return (sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(table: ScoreTable) -> float:
    scores, labels = table.scores_labels()
    return auc_scores(scores, labels)


def auc_by_generator(table: ScoreTable) -> dict[str, float]:
    """Per-generator AUC (that generator's fakes against all reals)."""
    out = {"all": auc(table)}
    reals = [r for r in table.rows if r.label == "real"]
    tags = sorted({r.generator for r in table.rows if r.label == "fake"})
    for tag in tags:
        fakes = [r for r in table.rows if r.label == "fake" and r.generator == tag]
        out[tag] = auc(ScoreTable(reals + fakes))
    return out


# --- multi-seed reporting --------------------------------------------------------------


def multi_seed_report(run_fn: Callable[[int], dict[str, float]],
                      seeds: Sequence[int] = PAPER_SEEDS):
    """Mean and sample standard deviation per dataset tag across seeds."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds for a spread estimate")
    rows: list[tuple[str, int, float]] = []
    per_tag: dict[str, list[float]] = {}
    for seed in seeds:
        result = run_fn(seed)
        for tag in sorted(result):
            rows.append((tag, seed, float(result[tag])))
            per_tag.setdefault(tag, []).append(float(result[tag]))
    summary = {tag: (float(np.mean(vals)), float(np.std(vals, ddof=1)))
               for tag, vals in per_tag.items()}
    return rows, summary


def write_report_csv(rows: list[tuple[str, int, float]], path: str | Path):
    lines = ["dataset_tag,seed,auc"]
    lines += [f"{tag},{seed},{value:.6f}" for tag, seed, value in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary_csv(summary: dict[str, tuple[float, float]], path: str | Path):
    lines = ["dataset_tag,mean,std"]
    lines += [f"{tag},{m:.6f},{s:.6f}" for tag, (m, s) in sorted(summary.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_features_csv(ids: Sequence[str], labels: Sequence[str],
                       feats: np.ndarray, path: str | Path):
    """Per-video feature dump for external projection plots."""
    d = feats.shape[1]
    lines = ["id,label," + ",".join(f"f_{i}" for i in range(d))]
    for vid, label, row in zip(ids, labels, feats):
        lines.append(f"{vid},{label}," + ",".join(f"{v:.6g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    ids, labels, rows = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        ids.append(parts[0])
        labels.append(1 if parts[1] == "fake" else 0)
        rows.append([float(v) for v in parts[2:]])
    return ids, np.array(labels), np.array(rows, dtype=np.float64)


# --- k-means layer probe -----------------------------------------------------------------


def kmeans(x: np.ndarray, k: int, seed: int = 0, restarts: int = 20,
           max_iters: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Lloyd's algorithm with Forgy init; best inertia over restarts."""
    n = len(x)
    rng = CounterRng(derive_seed(seed, "kmeans"))
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = x[rng.shuffled(n)[:k]].astype(np.float64).copy()
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(max_iters):
            d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
            assign = d2.argmin(axis=1)
            shift = 0.0
            for j in range(k):
                members = x[assign == j]
                if len(members):
                    new_c = members.mean(axis=0)
                    shift = max(shift, float(np.abs(new_c - centers[j]).max()))
                    centers[j] = new_c
            if shift < tol:
                break
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        if inertia < best_inertia:
            best_inertia = inertia
            best_assign = assign.copy()
    return best_assign, best_inertia


def cluster_accuracy(assign: np.ndarray, labels: np.ndarray) -> float:
    """Best binary-label agreement over the two assignment permutations."""
    match = float((assign == labels).mean())
    return max(match, 1.0 - match)


def layer_probe(features: dict[str, tuple[np.ndarray, np.ndarray]], k: int = 2,
                seed: int = 0) -> dict[str, float]:
    """Clustering accuracy per layer from (features, labels) pairs."""
    if k != 2:
        raise ValueError("binary probe only")
    out: dict[str, float] = {}
    for layer in sorted(features):
        x, labels = features[layer]
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels)
        if len(x) < 2 * k:
            raise DegenerateFeatures(f"layer {layer}: need >= {2 * k} samples, got {len(x)}")
        if float(x.var()) == 0.0:
            raise DegenerateFeatures(f"layer {layer}: zero-variance features")
        assign, _ = kmeans(x, k, seed=seed)
        out[layer] = cluster_accuracy(assign, labels)
    return out


# --- ablation -------------------------------------------------------------------------------


def validate_flags(flags: Iterable[str]) -> frozenset[str]:
    fl = frozenset(flags)
    unknown = fl - set(ABLATION_FLAGS)
    if unknown:
        raise InvalidCombination(f"unknown ablation flags: {sorted(unknown)}")
    if "fusion" in fl and "mmfr" not in fl:
        raise InvalidCombination("fusion requires mmfr")
    return fl


def flags_tag(flags: frozenset[str]) -> str:
    return "+".join(f for f in ABLATION_FLAGS if f in flags) or "base"


def ablation_run(flags: Iterable[str], corpus: LoadedCorpus,
                 seeds: Sequence[int], base_cfg, vqvae,
                 recon_cache: Optional[dict] = None):
    """Train and evaluate one module combination across seeds.

    Everything stays identical except the toggled modules; no flags at all
    is the plain-attention baseline with raw frames only.
    """
    from . import trainer  # deferred: trainer imports this module

    fl = validate_flags(flags)
    tag = flags_tag(fl)
    cfg = replace(base_cfg,
                  use_recon="recon" in fl,
                  use_mmfr="mmfr" in fl,
                  use_fusion="fusion" in fl)
    mode = "iafa" if "iafa" in fl else "base"
    if cfg.use_recon and recon_cache is None:
        recon_cache = trainer.build_recon_cache(vqvae, corpus)
    rows = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        result = trainer.train(run_cfg, corpus, vqvae, recon_cache=recon_cache,
                               mode=mode)
        detector, _, _ = _detector_from_state(result.best_state)
        provider = trainer.make_provider(run_cfg) if run_cfg.use_mmfr else None
        table = score_split(corpus, detector, vqvae, provider, run_cfg,
                            split="test", seed=seed,
                            recon_cache=recon_cache)
        rows.append((tag, seed, auc(table)))
    values = [v for _, _, v in rows]
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return rows, {tag: (mean, std)}


def _detector_from_state(state: dict):
    from . import trainer

    from .checkpoint import decode_text
    from .config import config_from_echo

    cfg = config_from_echo(decode_text(state["__config__"]))
    mode = "iafa" if any(k.startswith("det.iafa.layer0.frame") for k in state) else "base"
    detector = trainer.Detector(cfg, mode=mode)
    for name, p in detector.trainable_params().items():
        p.data[:] = state[f"det.{name}"]
    return detector, None, cfg
