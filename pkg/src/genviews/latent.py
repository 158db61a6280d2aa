"""Style-latent container and structural latent operations.

A style-based generator consumes a stack of per-block style codes: a B x D
matrix whose rows each modulate one synthesis block.  Early rows steer
coarse structure (layout, pose), later rows steer fine detail (texture,
color).  This module defines the latent container, the coarse/middle/fine
partition of block rows, and the structural edits (row swapping, per-block
offsets) that the perturbation samplers are built from.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Granularity",
    "BlockPartition",
    "StyleLatent",
    "LatentShapeError",
    "BlockRangeError",
    "default_partition",
    "style_mix",
    "add_block_delta",
]


class LatentShapeError(ValueError):
    """A latent, partition, or delta has an incompatible shape."""


class BlockRangeError(IndexError):
    """A block-row range falls outside [0, B)."""


class Granularity(Enum):
    COARSE = "coarse"
    MIDDLE = "middle"
    FINE = "fine"


# Relative block budget of the coarse/middle/fine split.  An 18-block
# generator splits 4/6/8; other block counts keep the same proportions.
_SPLIT_WEIGHTS = (4, 6, 8)


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint [start, stop) row ranges covering all B blocks."""

    coarse: tuple[int, int]
    middle: tuple[int, int]
    fine: tuple[int, int]

    def __post_init__(self) -> None:
        ranges = (self.coarse, self.middle, self.fine)
        for lo, hi in ranges:
            if not (isinstance(lo, int) and isinstance(hi, int)):
                raise LatentShapeError(f"partition bounds must be ints: {ranges}")
            if hi <= lo:
                raise LatentShapeError(f"empty partition range [{lo}, {hi})")
        if self.coarse[0] != 0:
            raise LatentShapeError("coarse range must start at block 0")
        if self.middle[0] != self.coarse[1] or self.fine[0] != self.middle[1]:
            raise LatentShapeError(f"partition ranges must be contiguous: {ranges}")

    @property
    def blocks(self) -> int:
        return self.fine[1]

    def range_for(self, granularity: Granularity) -> tuple[int, int]:
        if granularity is Granularity.COARSE:
            return self.coarse
        if granularity is Granularity.MIDDLE:
            return self.middle
        return self.fine


def default_partition(blocks: int) -> BlockPartition:
    """Split ``blocks`` rows into coarse/middle/fine at 4:6:8 proportions.

    Uses largest-remainder rounding so the counts sum exactly to ``blocks``;
    every band is kept non-empty by borrowing from the largest band when a
    quota rounds to zero.  Requires ``blocks >= 3``.
    """
    if blocks < 3:
        raise LatentShapeError(f"need at least 3 blocks to partition, got {blocks}")
    total = sum(_SPLIT_WEIGHTS)
    quotas = [blocks * w / total for w in _SPLIT_WEIGHTS]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(3), key=lambda j: (-remainders[j], j))
    for j in order[: blocks - sum(counts)]:
        counts[j] += 1
    while min(counts) == 0:
        counts[max(range(3), key=lambda j: counts[j])] -= 1
        counts[counts.index(0)] += 1
    c, m = counts[0], counts[0] + counts[1]
    return BlockPartition(coarse=(0, c), middle=(c, m), fine=(m, blocks))


@dataclass(frozen=True)
class StyleLatent:
    """Immutable B x D matrix of per-block style codes, stored float32."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise LatentShapeError(f"latent must be 2-D (B, D), got shape {v.shape}")
        if v.shape[0] < 3 or v.shape[1] < 1:
            raise LatentShapeError(f"latent needs B >= 3 and D >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise LatentShapeError("latent contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def blocks(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def copy_values(self) -> np.ndarray:
        return self.values.copy()


def style_mix(
    w_star: StyleLatent,
    w_rand: StyleLatent,
    granularity: Granularity,
    partition: BlockPartition,
) -> StyleLatent:
    """Replace one granularity band of ``w_star`` with rows from ``w_rand``.

    Swapped rows are copied bit-identically; all other rows keep the values
    of ``w_star``.
    """
    if w_star.values.shape != w_rand.values.shape:
        raise LatentShapeError(
            f"latent shapes differ: {w_star.values.shape} vs {w_rand.values.shape}"
        )
    if partition.blocks != w_star.blocks:
        raise LatentShapeError(
            f"partition covers {partition.blocks} blocks, latent has {w_star.blocks}"
        )
    lo, hi = partition.range_for(granularity)
    out = w_star.copy_values()
    out[lo:hi] = w_rand.values[lo:hi]
    return StyleLatent(out)


def add_block_delta(
    latent: StyleLatent, delta: np.ndarray, rows: tuple[int, int]
) -> StyleLatent:
    """Add ``delta`` to the rows in ``[rows[0], rows[1])``, leaving the rest.

    ``delta`` may be a single (D,) vector, broadcast to every selected row,
    or a (rows, D) matrix with one offset per selected row.
    """
    lo, hi = rows
    if not (0 <= lo < hi <= latent.blocks):
        raise BlockRangeError(f"row range [{lo}, {hi}) outside [0, {latent.blocks})")
    d = np.asarray(delta, dtype=np.float32)
    if d.ndim == 1:
        if d.shape[0] != latent.dim:
            raise LatentShapeError(f"delta dim {d.shape[0]} != latent dim {latent.dim}")
    elif d.ndim == 2:
        if d.shape != (hi - lo, latent.dim):
            raise LatentShapeError(
                f"delta shape {d.shape} incompatible with {hi - lo} rows of dim {latent.dim}"
            )
    else:
        raise LatentShapeError(f"delta must be 1-D or 2-D, got shape {d.shape}")
    out = latent.copy_values()
    out[lo:hi] += d
    return StyleLatent(out)
