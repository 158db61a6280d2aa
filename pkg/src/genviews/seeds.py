"""Named, reproducible seed derivation.

Every random decision in the toolkit flows from one global seed through a
chain of string labels (task name, split name, image id, ...).  Derivation
hashes the labels, so it is stable across processes and machines, unlike
Python's builtin ``hash``.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def derive_seed(*parts: int | str) -> int:
    """Collapse a root seed plus label strings into a 63-bit child seed."""
    h = hashlib.sha256()
    for part in parts:
        token = f"i:{part}" if isinstance(part, int) else f"s:{part}"
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def derive_rng(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
