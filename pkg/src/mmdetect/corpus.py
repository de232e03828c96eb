"""Deterministic synthetic video corpus and the clip container format.

Real clips are procedural: multi-octave value noise drifting smoothly
under a global velocity, with a few soft moving blobs on top.  Fake clips
are per-frame VQ-VAE reconstructions of real clips, optionally with
independent per-frame latent jitter as a temporal-inconsistency knob.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import (BadMagic, BadParam, InvalidHeader, ShapeMismatch,
                     TruncatedFile, UntrainedModel)
from .rng import CounterRng, derive_seed
from .vqvae import VqVaeModel, quantize

CLIP_MAGIC = b"MMDV"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIfB")

LABELS = ("real", "fake")


def worker_count() -> int:
    """Worker cap from MMDET_THREADS; 0/absent means hardware default."""
    raw = os.environ.get("MMDET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items):
    """Order-preserving map over an optional thread pool."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    id: str
    label: str
    fps: float = 8.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise InvalidHeader(f"clip needs (N,H,W,C) frames with N >= 1, got {self.frames.shape}")
        if self.label not in LABELS:
            raise BadParam(f"label must be real|fake, got {self.label!r}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise BadParam(f"frame values outside [0,1]: [{lo}, {hi}]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] / self.fps


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest file
    label: str
    split: str  # train | val | test
    generator: str


# --- procedural real clips ----------------------------------------------------


def _lattice_sample(lattice: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sample of a periodic lattice at fractional coordinates."""
    g = lattice.shape[0]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)
    y0 %= g
    x0 %= g
    y1 = (y0 + 1) % g
    x1 = (x0 + 1) % g
    top = lattice[y0, x0] * (1 - fx) + lattice[y0, x1] * fx
    bot = lattice[y1, x0] * (1 - fx) + lattice[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _gen_one_real(seed: int, index: int, n_frames: int, size: int, fps: float) -> VideoClip:
    rng = CounterRng(derive_seed(seed, "real-clip", index))
    octaves = [(4, 0.55), (8, 0.3), (16, 0.15)]
    lattices = [rng.uniform((g, g)) for g, _ in octaves]
    drift = rng.uniform((2,)) * 1.6 - 0.8  # pixels per frame
    tint = rng.uniform((3,)) * 0.1 - 0.05

    n_blobs = 2 + rng.randint(3)
    blob_pos = rng.uniform((n_blobs, 2)) * size
    blob_vel = rng.uniform((n_blobs, 2)) * 2.4 - 1.2  # px per frame
    blob_radius = 3.0 + rng.uniform((n_blobs,)) * 3.0
    blob_amp = (rng.uniform((n_blobs, 3)) * 0.5 - 0.25)

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    for t in range(n_frames):
        tex = np.zeros((size, size), dtype=np.float32)
        py = yy + drift[0] * t
        px = xx + drift[1] * t
        for (g, w), lat in zip(octaves, lattices):
            scale = g / size
            tex += w * _lattice_sample(lat, py * scale, px * scale)
        frame = 0.2 + 0.6 * tex[..., None] + tint[None, None, :]
        for b in range(n_blobs):
            cy, cx = blob_pos[b] + blob_vel[b] * t
            dy = (yy - cy + size / 2) % size - size / 2
            dx = (xx - cx + size / 2) % size - size / 2
            splat = np.exp(-(dy * dy + dx * dx) / (2.0 * blob_radius[b] ** 2))
            frame += splat[..., None] * blob_amp[b][None, None, :]
        frames[t] = np.clip(frame, 0.0, 1.0)
    return VideoClip(frames, id=f"real_{index:04d}", label="real", fps=fps)


def gen_real(seed: int, count: int, n_frames: int = 16, size: int = 32,
             fps: float = 8.0) -> list[VideoClip]:
    """Procedural real-analog clips, fully determined by (seed, args)."""
    return _parallel_map(
        lambda i: _gen_one_real(seed, i, n_frames, size, fps), list(range(count)))


# --- fakes via the VQ-VAE -------------------------------------------------------


def gen_fake(real_clips: list[VideoClip], model: VqVaeModel, jitter: float,
             seed: int = 0, sanity_mse: float = 0.02) -> list[VideoClip]:
    """Reconstruct real clips through the VQ-VAE to synthesize fakes.

    ``jitter`` is the probability of replacing each latent cell's code
    with a uniformly random codebook index, independently per frame.
    """
    if not 0.0 <= jitter <= 1.0:
        raise BadParam(f"jitter must be in [0,1], got {jitter}")
    if real_clips:
        probe = real_clips[0].frames
        recon = model.reconstruct_frames(probe)
        mse = float(((probe - recon) ** 2).mean())
        if mse > sanity_mse:
            raise UntrainedModel(f"reconstruction MSE {mse:.4f} > bound {sanity_mse}")

    k = model.codebook.size

    def make(clip: VideoClip) -> VideoClip:
        model.check_input_shape(clip.frames.shape[1], clip.frames.shape[2])
        with no_grad():
            z = model.encode(Tensor(clip.frames, dtype=None))
            indices, _ = quantize(z, model.codebook)
            if jitter > 0.0:
                rng = CounterRng(derive_seed(seed, "jitter", clip.id))
                flip = rng.uniform(indices.shape) < jitter
                randoms = rng.randint(k, indices.shape)
                indices = np.where(flip, randoms, indices)
            decoded = model.decode(Tensor(model.codebook.entries.data[indices], dtype=None))
        frames = np.clip(decoded.data, 0.0, 1.0)
        return VideoClip(frames, id=clip.id.replace("real", "fake", 1),
                         label="fake", fps=clip.fps)

    return _parallel_map(make, real_clips)


# --- perturbations ----------------------------------------------------------------


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def _blur_frames(frames: np.ndarray, sigma: float) -> np.ndarray:
    kern = _gaussian_kernel(sigma)
    radius = len(kern) // 2
    out = frames
    for axis in (1, 2):  # H then W
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, kv in enumerate(kern):
            sl = [slice(None)] * 4
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def _bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize over the (H, W) axes."""
    n, h, w, c = frames.shape
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[None, :, None, None]
    fx = (xs - x0).astype(np.float32)[None, None, :, None]
    top = frames[:, y0][:, :, x0] * (1 - fx) + frames[:, y0][:, :, x1] * fx
    bot = frames[:, y1][:, :, x0] * (1 - fx) + frames[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def perturb(clip: VideoClip, kind: str, sigma: float = 3.0, ratio: float = 0.7,
            angle: int = 90) -> VideoClip:
    """Robustness perturbations: blur, resize, rotate, or all three.

    ``mixed`` applies blur, then resize, then rotate.  Rotation is an
    exact index remap in multiples of 90 degrees (counter-clockwise) and
    requires square frames, so every kind preserves the clip shape.
    """
    frames = clip.frames
    h, w = frames.shape[1], frames.shape[2]

    def do_blur(fr):
        if sigma <= 0:
            raise BadParam(f"blur sigma must be > 0, got {sigma}")
        return _blur_frames(fr, sigma)

    def do_resize(fr):
        if not 0.0 < ratio <= 1.0:
            raise BadParam(f"resize ratio must be in (0,1], got {ratio}")
        small_h = max(1, int(round(h * ratio)))
        small_w = max(1, int(round(w * ratio)))
        return _bilinear_resize(_bilinear_resize(fr, small_h, small_w), h, w)

    def do_rotate(fr):
        if angle % 90 != 0:
            raise BadParam(f"rotation must be a multiple of 90, got {angle}")
        if h != w and (angle // 90) % 2 != 0:
            raise BadParam("90/270 rotation needs square frames")
        return np.rot90(fr, k=(angle // 90) % 4, axes=(1, 2))

    if kind == "blur":
        frames = do_blur(frames)
    elif kind == "resize":
        frames = do_resize(frames)
    elif kind == "rotate":
        frames = do_rotate(frames)
    elif kind == "mixed":
        frames = do_rotate(do_resize(do_blur(frames)))
    else:
        raise BadParam(f"unknown perturbation kind {kind!r}")
    frames = np.clip(np.ascontiguousarray(frames, dtype=np.float32), 0.0, 1.0)
    return VideoClip(frames, id=clip.id, label=clip.label, fps=clip.fps)


# --- container I/O -------------------------------------------------------------------


def write_clip(clip: VideoClip, path: str | Path):
    path = Path(path)
    n, h, w, c = clip.frames.shape
    label = LABELS.index(clip.label)
    payload = clip.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, n, h, w, c, clip.fps, label))
        fh.write(payload)


def read_clip(path: str | Path) -> VideoClip:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: header needs {_HEADER.size} bytes, have {len(blob)}",
                            offset=len(blob))
    magic, version, n, h, w, c, fps, label = _HEADER.unpack_from(blob, 0)
    if magic != CLIP_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise InvalidHeader(f"{path}: unsupported version {version}")
    if n < 1 or h < 1 or w < 1 or c < 1 or label > 1:
        raise InvalidHeader(f"{path}: invalid header fields N={n} H={h} W={w} C={c} label={label}")
    need = n * h * w * c * 4
    have = len(blob) - _HEADER.size
    if have < need:
        raise TruncatedFile(
            f"{path}: frame data truncated at byte offset {len(blob)} "
            f"(need {need + _HEADER.size} bytes total)", offset=len(blob))
    frames = np.frombuffer(blob, dtype="<f4", count=n * h * w * c,
                           offset=_HEADER.size).reshape(n, h, w, c).copy()
    return VideoClip(frames, id=path.stem, label=LABELS[label], fps=fps)


# --- manifest -------------------------------------------------------------------------


def save_manifest(entries: list[ManifestEntry], path: str | Path):
    path = Path(path)
    seen = set()
    for e in entries:
        if e.path in seen:
            raise BadParam(f"duplicate manifest path {e.path!r}")
        seen.add(e.path)
    lines = [f"{e.path}\t{e.label}\t{e.split}\t{e.generator}" for e in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise InvalidHeader(f"{path}:{lineno}: expected 4 tab-separated fields")
        entry = ManifestEntry(*parts)
        if entry.path in seen:
            raise BadParam(f"{path}:{lineno}: duplicate path {entry.path!r}")
        seen.add(entry.path)
        if not (path.parent / entry.path).exists():
            raise InvalidHeader(f"{path}:{lineno}: missing file {entry.path!r}")
        entries.append(entry)
    return entries


def load_clips(manifest_path: str | Path,
               entries: list[ManifestEntry] | None = None) -> list[VideoClip]:
    base = Path(manifest_path).parent
    entries = load_manifest(manifest_path) if entries is None else entries
    return [read_clip(base / e.path) for e in entries]


@dataclass
class LoadedCorpus:
    """Manifest entries plus their clips, keyed by video id (file stem)."""

    entries: list[ManifestEntry]
    clips: dict[str, VideoClip]

    @classmethod
    def from_manifest(cls, manifest_path: str | Path) -> "LoadedCorpus":
        entries = load_manifest(manifest_path)
        base = Path(manifest_path).parent
        clips: dict[str, VideoClip] = {}
        for e in entries:
            clip = read_clip(base / e.path)
            if clip.id in clips:
                raise BadParam(f"duplicate video id {clip.id!r} in corpus")
            clips[clip.id] = clip
        return cls(entries=entries, clips=clips)

    def split(self, name: str) -> list[tuple[ManifestEntry, VideoClip]]:
        return [(e, self.clips[Path(e.path).stem]) for e in self.entries
                if e.split == name]


# --- corpus assembly -------------------------------------------------------------------


def build_real_corpus(seed: int, out_dir: str | Path, n_train: int, n_test: int,
                      n_frames: int = 16, size: int = 32, fps: float = 8.0
                      ) -> list[ManifestEntry]:
    """Write real clips plus manifest under out_dir; returns the entries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = gen_real(seed, n_train + n_test, n_frames=n_frames, size=size, fps=fps)
    entries = []
    for i, clip in enumerate(clips):
        rel = f"{clip.id}.mmdv"
        write_clip(clip, out_dir / rel)
        split = "train" if i < n_train else "test"
        entries.append(ManifestEntry(path=rel, label="real", split=split,
                                     generator="procedural"))
    save_manifest(entries, out_dir / "manifest.tsv")
    return entries


def extend_with_fakes(corpus_dir: str | Path, model: VqVaeModel, jitter: float,
                      out_dir: str | Path, seed: int = 0) -> list[ManifestEntry]:
    """Generate one fake per real clip (inheriting its split) and write a
    merged manifest into out_dir."""
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    real_entries = load_manifest(corpus_dir / "manifest.tsv")
    tag = f"vqvae-j{jitter:g}"
    merged: list[ManifestEntry] = []
    for e in real_entries:
        rel = os.path.relpath(corpus_dir / e.path, out_dir)
        merged.append(ManifestEntry(path=rel, label=e.label, split=e.split,
                                    generator=e.generator))
    reals = [read_clip(corpus_dir / e.path) for e in real_entries if e.label == "real"]
    splits = {e.path: e.split for e in real_entries}
    fakes = gen_fake(reals, model, jitter, seed=seed)
    for real, fake in zip((e for e in real_entries if e.label == "real"), fakes):
        rel = f"{fake.id}.mmdv"
        write_clip(fake, out_dir / rel)
        merged.append(ManifestEntry(path=rel, label="fake", split=splits[real.path],
                                    generator=tag))
    save_manifest(merged, out_dir / "manifest.tsv")
    return merged
