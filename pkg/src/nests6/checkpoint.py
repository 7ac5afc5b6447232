"""Binary checkpoint format.

Layout (little-endian)::

    8s   magic "NSTS6CKP"
    u32  version (1)
    u32  tensor count
    u32  metadata length, then that many bytes of UTF-8 "key=value\\n" lines
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                raw float32 data (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NSTS6CKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def decode_meta(blob: bytes) -> dict[str, str]:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    out = bytearray(MAGIC)
    blob = encode_meta(meta or {})
    out += struct.pack("<III", VERSION, len(tensors), len(blob))
    out += blob
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    return bytes(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count, meta_len = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = decode_meta(take(meta_len))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors, meta


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
