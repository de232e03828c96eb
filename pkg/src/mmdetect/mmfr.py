"""Multi-modal feature records: providers, projections, and the feature file.

A record pairs a pooled vision feature (1024) with fixed-length language
model hidden states (64 x 4096) for one cached frame of one video.  The
primary component never runs a language model itself; features arrive
either from the deterministic mock provider (testing and benchmarks) or
from a feature file produced offline by the exporter.
"""

from __future__ import annotations

import struct
from bisect import bisect_left
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadMagic, DimMismatch, NoRecords, TruncatedFile
from .layers import Linear
from .rng import CounterRng, derive_seed

VISION_DIM = 1024
LM_TOKENS = 64
LM_DIM = 4096
MMFR_TOKENS = 1 + LM_TOKENS  # one pooled vision row + the LM rows

FEATURE_MAGIC = b"MMFR"
FEATURE_VERSION = 1

MOCK_NOISE_SCALE = 0.25  # std of the label-independent feature noise
_UNIFORM_HALF_WIDTH = MOCK_NOISE_SCALE * np.sqrt(12.0) / 2.0


def _feature_noise(rng: CounterRng, shape) -> np.ndarray:
    """Zero-mean noise with std MOCK_NOISE_SCALE (uniform; cheap to draw)."""
    return (rng.uniform(shape) * (2.0 * _UNIFORM_HALF_WIDTH)
            - _UNIFORM_HALF_WIDTH).astype(np.float32)


@dataclass
class MMFRRecord:
    frame_key: str
    vision_feat: np.ndarray  # (1024,)
    lm_feat: np.ndarray      # (64, 4096)
    provenance: str          # mock | file

    def validate(self):
        if self.vision_feat.shape != (VISION_DIM,):
            raise DimMismatch(f"{self.frame_key}: vision feature {self.vision_feat.shape}, "
                              f"expected ({VISION_DIM},)")
        if self.lm_feat.shape != (LM_TOKENS, LM_DIM):
            raise DimMismatch(f"{self.frame_key}: LM feature {self.lm_feat.shape}, "
                              f"expected ({LM_TOKENS}, {LM_DIM})")
        if not (np.isfinite(self.vision_feat).all() and np.isfinite(self.lm_feat).all()):
            raise DimMismatch(f"{self.frame_key}: non-finite feature values")


def frame_key(video_id: str, t_seconds: float) -> str:
    return f"{video_id}@{t_seconds:g}"


def parse_frame_key(key: str) -> tuple[str, float]:
    vid, _, t = key.rpartition("@")
    return vid, float(t)


# --- mock provider --------------------------------------------------------------


@dataclass
class MockConfig:
    seed: int
    signal_strength: float = 0.0  # 0 = label-independent features
    noise_seed: int | None = None  # vary per evaluation run; directions stay put

    def __post_init__(self):
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError(f"signal_strength must be in [0,1], got {self.signal_strength}")

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit signal directions in vision and LM space, fixed by the seed."""
        dv = CounterRng(derive_seed(self.seed, "mock-dir-v")).normal((VISION_DIM,))
        dl = CounterRng(derive_seed(self.seed, "mock-dir-l")).normal((LM_DIM,))
        return (dv / np.linalg.norm(dv)).astype(np.float32), \
               (dl / np.linalg.norm(dl)).astype(np.float32)


def mock_provider(key: str, label: str, cfg: MockConfig) -> MMFRRecord:
    """Deterministic pseudo-random features keyed by (seed, frame key).

    The label shifts the vision feature by +-signal_strength along a unit
    direction derived from the seed, and every LM row by a second derived
    direction; with signal_strength 0 features are label-independent.
    """
    noise_seed = cfg.seed if cfg.noise_seed is None else cfg.noise_seed
    rng = CounterRng(derive_seed(noise_seed, "mock-record", key))
    fv = _feature_noise(rng, (VISION_DIM,))
    fl = _feature_noise(rng, (LM_TOKENS, LM_DIM))
    if cfg.signal_strength > 0.0:
        sign = 1.0 if label == "fake" else -1.0
        dv, dl = cfg.directions()
        fv = fv + np.float32(sign * cfg.signal_strength) * dv
        fl = fl + np.float32(sign * cfg.signal_strength) * dl[None, :]
    rec = MMFRRecord(frame_key=key, vision_feat=fv, lm_feat=fl, provenance="mock")
    rec.validate()
    return rec


# --- projection -----------------------------------------------------------------


class MmfrProjector:
    """Affine maps taking both feature kinds to the shared fusion width."""

    def __init__(self, dim: int, seed: int = 0):
        rng = CounterRng(seed).derive("mmfr-proj")
        self.dim = dim
        self.proj_v = Linear(rng, "proj_v", VISION_DIM, dim)
        self.proj_l = Linear(rng, "proj_l", LM_DIM, dim)

    def params(self) -> dict[str, Tensor]:
        return {**self.proj_v.params(), **self.proj_l.params()}


def project_and_concat(rec: MMFRRecord, proj: MmfrProjector) -> Tensor:
    """Row 0 is the projected vision feature; rows 1..64 the projected LM
    rows; output is (65, dim)."""
    rec.validate()
    return project_batch([rec], proj).reshape(MMFR_TOKENS, proj.dim)


def project_batch(records: list[MMFRRecord], proj: MmfrProjector) -> Tensor:
    """Batched projection: (B, 65, dim) for B records."""
    for rec in records:
        rec.validate()
    b = len(records)
    fv = np.stack([r.vision_feat for r in records])          # (B, 1024)
    fl = np.stack([r.lm_feat for r in records])               # (B, 64, 4096)
    head = proj.proj_v(Tensor(fv, dtype=None)).reshape(b, 1, proj.dim)
    rows = proj.proj_l(Tensor(fl.reshape(b * LM_TOKENS, LM_DIM), dtype=None))
    return ad.concat([head, rows.reshape(b, LM_TOKENS, proj.dim)], axis=1)


# --- feature file ------------------------------------------------------------------


def write_features(records: dict[str, MMFRRecord] | list[MMFRRecord], path: str | Path):
    recs = list(records.values()) if isinstance(records, dict) else list(records)
    for rec in recs:
        rec.validate()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(recs)))
        for rec in recs:
            key = rec.frame_key.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(rec.vision_feat.astype("<f4").tobytes())
            fh.write(rec.lm_feat.astype("<f4").tobytes())


def load_features(path: str | Path) -> dict[str, MMFRRecord]:
    """Parse a feature file into a keyed map, validating dims per record."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedFile(f"{path}: header needs 12 bytes, have {len(blob)}",
                            offset=len(blob))
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FEATURE_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    out: dict[str, MMFRRecord] = {}
    off = 12
    vec_bytes = VISION_DIM * 4
    mat_bytes = LM_TOKENS * LM_DIM * 4
    for i in range(count):
        if off + 2 > len(blob):
            raise TruncatedFile(f"{path}: record {i} key length truncated at byte {off}",
                                offset=off)
        (key_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + key_len + vec_bytes + mat_bytes > len(blob):
            raise TruncatedFile(f"{path}: record {i} truncated at byte {off}", offset=off)
        key = blob[off:off + key_len].decode("utf-8")
        off += key_len
        fv = np.frombuffer(blob, dtype="<f4", count=VISION_DIM, offset=off).copy()
        off += vec_bytes
        fl = np.frombuffer(blob, dtype="<f4", count=LM_TOKENS * LM_DIM,
                           offset=off).reshape(LM_TOKENS, LM_DIM).copy()
        off += mat_bytes
        rec = MMFRRecord(frame_key=key, vision_feat=fv, lm_feat=fl, provenance="file")
        try:
            rec.validate()
        except DimMismatch as exc:
            raise DimMismatch(f"record {i}: {exc}") from exc
        out[key] = rec
    return out


# --- cached lookup -------------------------------------------------------------------


def cache_timestamps(duration_s: float, interval_s: float = 6.0) -> list[float]:
    """Grid of cached-frame timestamps: 0, interval, ... within the video."""
    if interval_s <= 0:
        raise ValueError(f"interval must be > 0, got {interval_s}")
    out = [0.0]
    t = interval_s
    while t < duration_s:
        out.append(t)
        t += interval_s
    return out


def nearest_timestamp(times: list[float], t: float) -> float:
    """Nearest value in a sorted list; ties resolve toward the earlier one."""
    i = bisect_left(times, t)
    if i == 0:
        return times[0]
    if i == len(times):
        return times[-1]
    before, after = times[i - 1], times[i]
    return before if t - before <= after - t else after


def cached_lookup(records: dict[float, MMFRRecord], timestamp_s: float,
                  interval_s: float = 6.0) -> MMFRRecord:
    """Record at the cached timestamp nearest the query; ties go earlier."""
    if not records:
        raise NoRecords("no cached records for video")
    return records[nearest_timestamp(sorted(records), timestamp_s)]


# --- providers --------------------------------------------------------------------------


class MockProvider:
    """Generates records on the cache grid directly from the mock config.

    Records are pure functions of (config, key, label); a bounded FIFO
    cache skips regeneration for repeatedly sampled videos.
    """

    provenance = "mock"

    def __init__(self, cfg: MockConfig, interval_s: float = 6.0,
                 cache_size: int = 1024):
        self.cfg = cfg
        self.interval_s = interval_s
        self.cache_size = cache_size
        self._cache: OrderedDict[tuple, MMFRRecord] = OrderedDict()

    def for_clip(self, video_id: str, label: str, t_seconds: float,
                 duration_s: float) -> MMFRRecord:
        grid = cache_timestamps(duration_s, self.interval_s)
        t = nearest_timestamp(grid, t_seconds)
        cache_key = (video_id, label, t)
        rec = self._cache.get(cache_key)
        if rec is None:
            rec = mock_provider(frame_key(video_id, t), label, self.cfg)
            self._cache[cache_key] = rec
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return rec


class FileProvider:
    """Serves records parsed from a feature file, keyed video@seconds."""

    provenance = "file"

    def __init__(self, path: str | Path, interval_s: float = 6.0):
        self.interval_s = interval_s
        self.by_video: dict[str, dict[float, MMFRRecord]] = {}
        for key, rec in load_features(path).items():
            vid, t = parse_frame_key(key)
            self.by_video.setdefault(vid, {})[t] = rec

    def for_clip(self, video_id: str, label: str, t_seconds: float,
                 duration_s: float) -> MMFRRecord:
        if video_id not in self.by_video:
            raise NoRecords(f"no feature records for video {video_id!r}")
        return cached_lookup(self.by_video[video_id], t_seconds, self.interval_s)
