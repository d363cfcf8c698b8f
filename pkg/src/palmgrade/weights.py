"""Bit-exact weight archives.

Layout (all integers little-endian)::

    b"PFWT"  u16 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim,
              u8 dtype (1 = float32), float32 payload }
    u32 CRC32 of every preceding byte

Every slot from ``LayerGraph.named_params`` is stored, including frozen
parameters and BatchNorm moving statistics.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchiveError, BadMagicError, ChecksumError, ShapeError
from .layers import LayerGraph

MAGIC = b"PFWT"
VERSION = 1
DTYPE_F32 = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class ArchiveInfo:
    path: str
    version: int
    tensors: list[tuple[str, tuple]]
    crc32: int
    size: int

    def format(self) -> str:
        lines = [f"{self.path}: version {self.version}, {len(self.tensors)} tensors, "
                 f"{self.size} bytes, crc32 {self.crc32:08x}"]
        lines += [f"  {name:60s} {'x'.join(map(str, shape)) or 'scalar'}"
                  for name, shape in self.tensors]
        return "\n".join(lines)


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 0xFF:
            raise ArchiveError(f"{name}: rank {arr.ndim} exceeds the format limit")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Parse an archive; the CRC is verified before any field is trusted."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a weight archive (bad magic bytes)")
    if len(blob) < 14:
        raise ChecksumError("archive truncated")
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise ChecksumError("archive CRC32 mismatch (corrupt or truncated file)")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    pos = 10
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (dtype,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if dtype != DTYPE_F32:
                raise ArchiveError(f"{name}: unsupported dtype code {dtype}")
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise ArchiveError(f"{name}: payload runs past the end of the archive")
            if name in tensors:
                raise ArchiveError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(body, _LE_F32, nbytes // 4, pos) \
                .astype(np.float32).reshape(dims)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArchiveError(f"malformed archive: {exc}") from None
    if pos != len(body):
        raise ArchiveError(f"{len(body) - pos} trailing bytes after the last tensor")
    return version, tensors


def read_archive(path) -> tuple[ArchiveInfo, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from None
    version, tensors = decode(blob)
    info = ArchiveInfo(str(path), version, [(k, v.shape) for k, v in tensors.items()],
                       struct.unpack("<I", blob[-4:])[0], len(blob))
    return info, tensors


def save_weights(graph: LayerGraph, path) -> ArchiveInfo:
    """Write every parameter slot of ``graph``; the file appears atomically."""
    tensors = graph.named_params()
    blob = encode(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise ArchiveError(f"cannot write {path}: {exc}") from None
    return ArchiveInfo(str(path), VERSION, [(k, v.shape) for k, v in tensors.items()],
                       struct.unpack("<I", blob[-4:])[0], len(blob))


def load_weights(graph: LayerGraph, path, prefix: str | None = None) -> int:
    """Overwrite graph parameters from an archive; returns the number loaded.

    With ``prefix`` only archive tensors whose name starts with it are
    considered. Every selected tensor must exist in the graph with the same
    shape; nothing is modified unless all of them fit.
    """
    _, tensors = read_archive(path)
    params = graph.named_params()
    selected = {k: v for k, v in tensors.items() if prefix is None or k.startswith(prefix)}
    for name, arr in selected.items():
        if name not in params:
            raise ShapeError(f"archive tensor {name!r} has no counterpart in the graph")
        if params[name].shape != arr.shape:
            raise ShapeError(f"{name}: archive shape {arr.shape} != graph shape "
                             f"{params[name].shape}")
    for name, arr in selected.items():
        params[name][...] = arr
    return len(selected)
