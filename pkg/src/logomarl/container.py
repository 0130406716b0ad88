"""Binary tensor container shared by checkpoints, datasets and buffers.

Layout (all integers little-endian u32)::

    b"LOGO" | version | section tag (4 ASCII bytes) | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | f32 payload (LE)
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LOGO"
VERSION = 1


class ContainerError(ValueError):
    pass


class BadFormatError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class SectionMismatchError(ContainerError):
    pass


class EnvMismatchError(ContainerError):
    pass


def encode(tag: str, tensors: dict[str, np.ndarray]) -> bytes:
    tag_b = tag.encode("ascii")
    if len(tag_b) != 4:
        raise ValueError(f"section tag must be 4 ASCII bytes, got {tag!r}")
    parts = [MAGIC, struct.pack("<I", VERSION), tag_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes, expect_tag: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadFormatError("bad format: missing LOGO magic bytes")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"truncated file: needed {n} bytes at offset {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    try:
        tag = take(4).decode("ascii")
    except UnicodeDecodeError as exc:
        raise BadFormatError("bad format: section tag is not ASCII") from exc
    if expect_tag is not None and tag != expect_tag:
        raise SectionMismatchError(f"section {tag!r}, expected {expect_tag!r}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32)
        tensors[name] = payload.reshape(dims)
    if pos != len(blob):
        raise BadFormatError(f"bad format: {len(blob) - pos} trailing bytes")
    return tag, tensors


def save(path: str | os.PathLike, tag: str, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tag, tensors))


def load(path: str | os.PathLike, expect_tag: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), expect_tag)
