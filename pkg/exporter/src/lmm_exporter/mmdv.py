"""Reader for the detector's clip container (magic MMDV), the external
interface through which the exporter consumes videos."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIIIIIfB")
LABELS = ("real", "fake")


class DecodeError(Exception):
    pass


@dataclass
class Clip:
    frames: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    id: str
    label: str
    fps: float

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] / self.fps


def read_clip(path: str | Path) -> Clip:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DecodeError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, n, h, w, c, fps, label = _HEADER.unpack_from(blob, 0)
    if magic != b"MMDV":
        raise DecodeError(f"{path}: bad magic {magic!r}")
    if version != 1 or n < 1 or h < 1 or w < 1 or c < 1 or label > 1:
        raise DecodeError(f"{path}: invalid header")
    need = n * h * w * c * 4
    if len(blob) - _HEADER.size < need:
        raise DecodeError(f"{path}: truncated frame data")
    frames = np.frombuffer(blob, dtype="<f4", count=n * h * w * c,
                           offset=_HEADER.size).reshape(n, h, w, c).copy()
    return Clip(frames=frames, id=path.stem, label=LABELS[label], fps=fps)
