"""Versioned binary checkpoints.

Layout: magic "HYPN", little-endian u32 version, a section table
(name, absolute offset, byte length), raw tensor blobs with shape
headers, and a trailing CRC32 over everything before it.  One section
named __meta__ holds a JSON blob with the model kind and scalar config;
every other section is one f32 tensor.  Writes are atomic (temp file +
rename).  Models participate through a small kind registry and a
to_state()/from_state() pair.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"HYPN"
VERSION = 1
META_SECTION = "__meta__"


class CheckpointError(Exception):
    """Base for checkpoint codec failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


_REGISTRY: dict[str, type] = {}


def register(kind: str):
    """Class decorator hooking a model into save/load dispatch."""
    def deco(cls):
        _REGISTRY[kind] = cls
        cls.checkpoint_kind = kind
        return cls
    return deco


def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise CheckpointTruncatedError("tensor header truncated")
    (ndim,) = struct.unpack_from("<I", blob, 0)
    if len(blob) < 4 + 4 * ndim:
        raise CheckpointTruncatedError("tensor shape truncated")
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    data = np.frombuffer(blob, dtype="<f4", offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointTruncatedError("tensor payload truncated")
    return data.reshape(shape).astype(np.float32).copy()


def write_sections(path: str, sections: dict[str, bytes]) -> None:
    names = list(sections)
    header = MAGIC + struct.pack("<II", VERSION, len(names))
    table_size = sum(2 + len(n.encode()) + 16 for n in names)
    offset = len(header) + table_size
    table = b""
    for n in names:
        nb = n.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<QQ", offset, len(sections[n]))
        offset += len(sections[n])
    body = header + table + b"".join(sections[n] for n in names)
    body += struct.pack("<I", zlib.crc32(body))
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sections(path: str) -> dict[str, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 + 4:
        raise CheckpointTruncatedError("file shorter than header")
    if raw[:4] != MAGIC:
        raise CheckpointMagicError("bad magic bytes")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointChecksumError("trailing CRC32 mismatch")
    pos = 12
    sections: dict[str, bytes] = {}
    for _ in range(count):
        if pos + 2 > len(body):
            raise CheckpointTruncatedError("section table truncated")
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        if pos + 16 > len(body):
            raise CheckpointTruncatedError("section table truncated")
        off, length = struct.unpack_from("<QQ", body, pos)
        pos += 16
        if off + length > len(body):
            raise CheckpointTruncatedError(f"section {name} out of bounds")
        sections[name] = body[off:off + length]
    return sections


def save_checkpoint(model, path: str) -> None:
    """Serialize any registered model (PriorModel, NerfParams, ...)."""
    kind = getattr(model, "checkpoint_kind", None)
    if kind not in _REGISTRY:
        raise CheckpointError(f"model type {type(model).__name__} is not registered")
    meta, arrays = model.to_state()
    meta = dict(meta)
    meta["kind"] = kind
    sections = {META_SECTION: json.dumps(meta, sort_keys=True).encode()}
    for name, arr in arrays.items():
        if name == META_SECTION:
            raise CheckpointError("reserved section name")
        sections[name] = _encode_tensor(arr)
    write_sections(path, sections)


def load_checkpoint(path: str, expect_kind: str | None = None):
    sections = read_sections(path)
    if META_SECTION not in sections:
        raise CheckpointTruncatedError("missing meta section")
    meta = json.loads(sections.pop(META_SECTION).decode())
    kind = meta.pop("kind", None)
    if kind not in _REGISTRY:
        raise CheckpointError(f"unknown model kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, found {kind!r}")
    arrays = {name: _decode_tensor(blob) for name, blob in sections.items()}
    return _REGISTRY[kind].from_state(meta, arrays)
