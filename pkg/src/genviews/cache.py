"""Append-only binary cache of projection results.

Projection is the expensive stage, so every optimized latent is persisted
and keyed by (image id, config digest); reruns with an unchanged pipeline
load latents instead of optimizing.  A digest mismatch means the generator,
encoder, or projection settings changed, and the stale record is ignored.

File layout (integers little-endian):

    header: magic b"GVLC", version u16, B u16, D u32
    record: id_len u16, image id UTF-8,
            digest 32 bytes,
            latent B*D float32,
            l1 f32, perceptual f32, latent-term f32,
            steps u32,
            crc32 u32 over the record bytes before the checksum

Records whose checksum fails are skipped (and counted) rather than taking
the whole cache down; a truncated trailing record is likewise tolerated, so
an interrupted run can append to the same file.  ``store`` is safe to call
from multiple threads.
"""

from __future__ import annotations

import struct
import threading
import zlib
from pathlib import Path

import numpy as np

from .latent import StyleLatent
from .projection import ProjectionResult

__all__ = ["CacheError", "LatentCache"]

_MAGIC = b"GVLC"
_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_DIGEST_LEN = 32


class CacheError(RuntimeError):
    """Cache file has an incompatible header or shape."""


class LatentCache:
    """Disk-backed map from (image id, config digest) to projection results."""

    def __init__(self, path: str | Path, blocks: int, latent_dim: int) -> None:
        self.path = Path(path)
        self.blocks = blocks
        self.latent_dim = latent_dim
        self.corrupt_records = 0
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, bytes], ProjectionResult] = {}
        if self.path.exists():
            self._read_existing()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(_HEADER.pack(_MAGIC, _VERSION, blocks, latent_dim))

    def _read_existing(self) -> None:
        blob = self.path.read_bytes()
        if len(blob) < _HEADER.size:
            raise CacheError(f"cache file too short: {self.path}")
        magic, version, blocks, dim = _HEADER.unpack_from(blob, 0)
        if magic != _MAGIC or version != _VERSION:
            raise CacheError(f"not a latent cache: {self.path}")
        if blocks != self.blocks or dim != self.latent_dim:
            raise CacheError(
                f"cache holds {blocks}x{dim} latents, expected "
                f"{self.blocks}x{self.latent_dim}"
            )
        off = _HEADER.size
        latent_bytes = 4 * self.blocks * self.latent_dim
        while off < len(blob):
            if off + 2 > len(blob):
                self.corrupt_records += 1
                break
            (id_len,) = struct.unpack_from("<H", blob, off)
            rec_len = 2 + id_len + _DIGEST_LEN + latent_bytes + 12 + 4 + 4
            if off + rec_len > len(blob):
                self.corrupt_records += 1
                break
            rec = blob[off : off + rec_len]
            body, crc_stored = rec[:-4], struct.unpack("<I", rec[-4:])[0]
            off += rec_len
            if zlib.crc32(body) != crc_stored:
                self.corrupt_records += 1
                continue
            image_id = body[2 : 2 + id_len].decode("utf-8")
            pos = 2 + id_len
            digest = body[pos : pos + _DIGEST_LEN]
            pos += _DIGEST_LEN
            latent = np.frombuffer(body[pos : pos + latent_bytes], dtype="<f4").reshape(
                self.blocks, self.latent_dim
            )
            pos += latent_bytes
            l1, percep, lat, steps = struct.unpack_from("<fffI", body, pos)
            self._entries[(image_id, digest)] = ProjectionResult(
                image_id=image_id,
                w_star=StyleLatent(latent),
                l1_term=float(l1),
                perceptual_term=float(percep),
                latent_term=float(lat),
                steps_used=int(steps),
                config_digest=digest,
            )

    def _encode(self, result: ProjectionResult) -> bytes:
        id_bytes = result.image_id.encode("utf-8")
        digest = result.config_digest
        if len(digest) != _DIGEST_LEN:
            raise CacheError(f"config digest must be {_DIGEST_LEN} bytes")
        latent = np.ascontiguousarray(result.w_star.values, dtype="<f4")
        if latent.shape != (self.blocks, self.latent_dim):
            raise CacheError(
                f"latent shape {latent.shape} does not match cache "
                f"({self.blocks}, {self.latent_dim})"
            )
        body = (
            struct.pack("<H", len(id_bytes))
            + id_bytes
            + digest
            + latent.tobytes()
            + struct.pack(
                "<fffI",
                result.l1_term,
                result.perceptual_term,
                result.latent_term,
                result.steps_used,
            )
        )
        return body + struct.pack("<I", zlib.crc32(body))

    def store(self, result: ProjectionResult) -> None:
        rec = self._encode(result)
        stored = ProjectionResult(
            image_id=result.image_id,
            w_star=result.w_star,
            l1_term=float(np.float32(result.l1_term)),
            perceptual_term=float(np.float32(result.perceptual_term)),
            latent_term=float(np.float32(result.latent_term)),
            steps_used=result.steps_used,
            config_digest=result.config_digest,
        )
        with self._lock:
            with open(self.path, "ab") as fh:
                fh.write(rec)
            self._entries[(result.image_id, result.config_digest)] = stored

    def load(self, image_id: str, digest: bytes) -> ProjectionResult | None:
        with self._lock:
            return self._entries.get((image_id, digest))

    def ids(self, digest: bytes) -> list[str]:
        with self._lock:
            return sorted(i for i, d in self._entries if d == digest)

    def __len__(self) -> int:
        return len(self._entries)
