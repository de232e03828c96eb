"""Writer for the MMFR feature file (magic MMFR, version 1, little-endian).

Layout: magic "MMFR" | version u32 | record_count u32 | per record:
key_len u16, key UTF-8, vision feature 1024 x f32, LM feature 64 x 4096 x f32.
Must stay bit-compatible with the detector's reader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VISION_DIM = 1024
LM_TOKENS = 64
LM_DIM = 4096
MAGIC = b"MMFR"
VERSION = 1


@dataclass
class FeatureRecord:
    frame_key: str
    vision_feat: np.ndarray  # (1024,) float32
    lm_feat: np.ndarray      # (64, 4096) float32

    def validate(self):
        if self.vision_feat.shape != (VISION_DIM,):
            raise ValueError(f"{self.frame_key}: vision feature {self.vision_feat.shape}")
        if self.lm_feat.shape != (LM_TOKENS, LM_DIM):
            raise ValueError(f"{self.frame_key}: LM feature {self.lm_feat.shape}")
        if not (np.isfinite(self.vision_feat).all() and np.isfinite(self.lm_feat).all()):
            raise ValueError(f"{self.frame_key}: non-finite values")


def write_records(records: list[FeatureRecord], path: str | Path):
    for rec in records:
        rec.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for rec in records:
            key = rec.frame_key.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(rec.vision_feat.astype("<f4").tobytes())
            fh.write(rec.lm_feat.astype("<f4").tobytes())


def frame_key(video_id: str, t_seconds: float) -> str:
    """Key convention shared with the detector: ``<video_id>@<seconds:%g>``."""
    return f"{video_id}@{t_seconds:g}"
