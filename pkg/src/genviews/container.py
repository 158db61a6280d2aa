"""Versioned binary container for named float32 arrays.

One format backs every persisted artifact except the latent cache:
generator, encoder, and classifier checkpoints plus fitted PCA bases.
Layout (integers little-endian):

    magic     8 bytes   b"GVCONT\\x00\\x01"
    meta_len  u32       followed by UTF-8 JSON metadata
    count     u32       number of arrays
    per array:
        name_len u16, name UTF-8
        ndim     u8,  dims u32 * ndim
        data     float32 little-endian, C order
    crc32     u32       over every preceding byte

The JSON metadata carries the artifact kind, shape fields, and the config
digest used for cache-validity checks.  Writes are atomic (temp file then
rename), so a crashed run never leaves a truncated container behind.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["ContainerError", "write_container", "read_container"]

_MAGIC = b"GVCONT\x00\x01"


class ContainerError(RuntimeError):
    """Container file is missing, corrupt, or of an unexpected kind."""


def write_container(
    path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]
) -> None:
    payload = dict(meta)
    payload["kind"] = kind
    header = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_container(
    path: str | Path, expect_kind: str | None = None
) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise ContainerError(f"container not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(_MAGIC) + 12 or blob[: len(_MAGIC)] != _MAGIC:
        raise ContainerError(f"not a container file: {path}")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise ContainerError(f"checksum mismatch in {path}")
    off = len(_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (meta_len,) = take("<I")
    meta = json.loads(body[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = body[off : off + 4 * n_items]
        if len(raw) != 4 * n_items:
            raise ContainerError(f"truncated array {name!r} in {path}")
        off += 4 * n_items
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise ContainerError(
            f"expected {expect_kind!r} container, found {meta.get('kind')!r} in {path}"
        )
    return meta, arrays
