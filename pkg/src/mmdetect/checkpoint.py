"""Named-tensor checkpoint file, bit-exact across save/load.

Layout (little-endian): magic "MMDC" | version u32 | tensor count u32 |
per tensor: name_len u16, name UTF-8, rank u8, dims u32 x rank, f32 data.

Non-tensor state rides along losslessly as float32 tensors: 64-bit
counters as four u16 chunks per value, text as one byte value per float.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (BadMagic, MissingTensor, ShapeMismatch, TruncatedFile,
                     UnknownTensor)

CKPT_MAGIC = b"MMDC"
CKPT_VERSION = 1


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | Path):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedFile(f"{path}: header needs 12 bytes, have {len(blob)}",
                            offset=len(blob))
    if blob[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for i in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
        except struct.error:
            raise TruncatedFile(f"{path}: tensor {i} header truncated at byte {off}",
                                offset=off) from None
        n = int(np.prod(dims)) if rank else 1
        if off + 4 * n > len(blob):
            raise TruncatedFile(f"{path}: tensor {name!r} data truncated at byte {off}",
                                offset=off)
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        out[name] = arr
    return out


def match_tensors(loaded: dict[str, np.ndarray], expected: dict[str, tuple]):
    """Strict name-set and shape agreement between a file and a model."""
    for name in expected:
        if name not in loaded:
            raise MissingTensor(f"checkpoint lacks tensor {name!r}")
    for name in loaded:
        if name not in expected:
            raise UnknownTensor(f"checkpoint has unexpected tensor {name!r}")
    for name, shape in expected.items():
        if tuple(loaded[name].shape) != tuple(shape):
            raise ShapeMismatch(f"{name!r}: checkpoint {loaded[name].shape} vs model {shape}")


# --- lossless sidecar encodings ------------------------------------------------


def encode_u64(*values: int) -> np.ndarray:
    """Each 64-bit value becomes four exactly-representable u16 chunks."""
    chunks = []
    for v in values:
        v &= 0xFFFFFFFFFFFFFFFF
        chunks += [(v >> s) & 0xFFFF for s in (0, 16, 32, 48)]
    return np.array(chunks, dtype=np.float32)


def decode_u64(arr: np.ndarray) -> list[int]:
    vals = np.asarray(arr).reshape(-1, 4).astype(np.uint64)
    out = []
    with np.errstate(over="ignore"):
        for row in vals:
            out.append(int(row[0]) | int(row[1]) << 16 | int(row[2]) << 32 | int(row[3]) << 48)
    return out


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
