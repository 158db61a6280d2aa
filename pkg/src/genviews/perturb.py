"""Latent perturbation samplers: the view generators of the ensemble.

Given a projected latent w*, each sampler produces nearby latents whose
synthesized images are alternative views of the same content.  Three
families, each restricted to one granularity band of block rows:

* isotropic -- add sigma-scaled Gaussian noise to the selected rows;
* principal directions -- add beta * eigenvalue * unit-eigenvector for a
  uniformly chosen top principal component of the mapped style-row
  distribution, with beta uniform on [-sigma, sigma];
* style mixing -- replace the selected rows outright with the mapped rows
  of fresh noise.

Sigma is a standard deviation in latent units.  Sigma zero collapses the
first two families onto w* exactly, so their ensembles degenerate to the
plain reconstruction.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .generator import GeneratorHandle
from .latent import BlockPartition, Granularity, StyleLatent, add_block_delta, style_mix
from .projection import ProjectionResult

__all__ = [
    "PERTURBATION_METHODS",
    "SIGMA_GRIDS",
    "PCABasis",
    "PerturbationSpec",
    "fit_pca",
    "sample_isotropic",
    "sample_pca",
    "sample_stylemix",
    "sample_views",
    "generate_views",
]

PERTURBATION_METHODS = ("isotropic", "pca", "stylemix")

# Per-domain sigma grids used by the sweep tooling, keyed by
# (domain, method, granularity name).
SIGMA_GRIDS: dict[tuple[str, str, str], tuple[float, ...]] = {
    ("car", "isotropic", "coarse"): (1.0, 1.5, 2.0),
    ("car", "isotropic", "fine"): (0.3, 0.5, 0.7),
    ("car", "pca", "coarse"): (1.0, 2.0, 3.0),
    ("car", "pca", "fine"): (1.0, 2.0, 3.0),
    ("cat", "isotropic", "coarse"): (0.5, 0.7, 1.0),
    ("cat", "isotropic", "fine"): (0.1, 0.2, 0.3),
    ("cat", "pca", "coarse"): (0.5, 0.7, 1.0),
    ("cat", "pca", "fine"): (0.5, 0.7, 1.0),
    ("face", "isotropic", "coarse"): (0.1, 0.2, 0.3),
    ("face", "isotropic", "fine"): (0.1, 0.2, 0.3),
    ("face", "pca", "coarse"): (1.0, 2.0, 3.0),
    ("face", "pca", "fine"): (1.0, 2.0, 3.0),
    ("toy", "isotropic", "coarse"): (0.1, 0.3, 0.5, 1.0),
    ("toy", "isotropic", "fine"): (0.1, 0.3, 0.5, 1.0),
    ("toy", "pca", "coarse"): (0.1, 0.3, 0.5, 1.0),
    ("toy", "pca", "fine"): (0.1, 0.3, 0.5, 1.0),
}


@dataclass(frozen=True)
class PerturbationSpec:
    """One sampler setting: method, granularity band, magnitude, seed."""

    method: str = "stylemix"
    granularity: Granularity = Granularity.FINE
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in PERTURBATION_METHODS:
            raise ValueError(f"method must be one of {PERTURBATION_METHODS}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


class PCABasis:
    """Top principal components of the mapped style-row distribution."""

    def __init__(
        self,
        mean: np.ndarray,
        directions: np.ndarray,
        eigenvalues: np.ndarray,
        num_samples: int,
    ) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != mean.shape[0]:
            raise ValueError("directions must be (n, D) matching the mean")
        if eigenvalues.shape != (directions.shape[0],):
            raise ValueError("one eigenvalue per direction required")
        if np.any(np.diff(eigenvalues) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        if np.any(eigenvalues < 0):
            raise ValueError("eigenvalues must be non-negative")
        self.mean = mean
        self.directions = directions
        self.eigenvalues = eigenvalues
        self.num_samples = num_samples

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"num_samples": self.num_samples}
        meta.update(extra_meta or {})
        write_container(
            path,
            "pca_basis",
            meta,
            {
                "mean": self.mean,
                "directions": self.directions,
                "eigenvalues": self.eigenvalues,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "PCABasis":
        meta, arrays = read_container(path, expect_kind="pca_basis")
        return cls(
            arrays["mean"],
            arrays["directions"],
            arrays["eigenvalues"],
            int(meta["num_samples"]),
        )


def fit_pca(
    generator: GeneratorHandle, num_samples: int = 10000, count: int = 20, seed: int = 0
) -> PCABasis:
    """Decompose the mapped style-row distribution into top components.

    Draws ``num_samples`` noise vectors, maps them through the generator's
    mapping network, and keeps the ``count`` leading principal directions
    (unit vectors, rows) with their covariance eigenvalues.  Warns and
    returns fewer directions when the sample covariance is rank-deficient.
    """
    if num_samples < 2:
        raise ValueError("need at least two samples for a covariance")
    if count < 1:
        raise ValueError("count must be positive")
    z = generator.sample_z(seed, num_samples)
    rows = generator.map_rows(z).astype(np.float64)
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, svals, vh = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (svals * svals) / (num_samples - 1)
    tol = eigenvalues[0] * 1e-12 if eigenvalues.size else 0.0
    usable = int((eigenvalues > tol).sum())
    if usable < count:
        warnings.warn(
            f"style-row covariance has rank {usable}, fewer than the "
            f"{count} requested directions",
            stacklevel=2,
        )
    keep = min(count, usable)
    directions = vh[:keep]
    # Fix each direction's sign so the entry of largest magnitude is
    # positive; eigenvectors are otherwise only defined up to sign.
    flips = np.sign(directions[np.arange(keep), np.abs(directions).argmax(axis=1)])
    directions = directions * flips[:, None]
    return PCABasis(mean, directions, eigenvalues[:keep], num_samples)


def _check_partition(latent: StyleLatent, partition: BlockPartition) -> None:
    if partition.blocks != latent.blocks:
        raise ValueError(
            f"partition covers {partition.blocks} blocks, latent has {latent.blocks}"
        )


def sample_isotropic(
    w_star: StyleLatent,
    spec: PerturbationSpec,
    partition: BlockPartition,
    count: int,
    seed: int | None = None,
) -> list[StyleLatent]:
    """Gaussian offsets with standard deviation sigma on one granularity band."""
    _check_partition(w_star, partition)
    if count < 0:
        raise ValueError("count must be non-negative")
    if spec.sigma == 0.0:
        return [StyleLatent(w_star.values) for _ in range(count)]
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lo, hi = partition.range_for(spec.granularity)
    out = []
    for _ in range(count):
        noise = spec.sigma * rng.standard_normal((hi - lo, w_star.dim))
        out.append(add_block_delta(w_star, noise.astype(np.float32), (lo, hi)))
    return out


def sample_pca(
    w_star: StyleLatent,
    basis: PCABasis,
    spec: PerturbationSpec,
    partition: BlockPartition,
    count: int,
    seed: int | None = None,
) -> list[StyleLatent]:
    """Offsets along uniformly chosen top principal directions.

    Each sample picks one of the basis directions uniformly and moves the
    selected rows by beta * eigenvalue * direction with beta uniform on
    [-sigma, sigma].
    """
    _check_partition(w_star, partition)
    if count < 0:
        raise ValueError("count must be non-negative")
    if basis.directions.shape[1] != w_star.dim:
        raise ValueError(
            f"basis dimension {basis.directions.shape[1]} != latent dim {w_star.dim}"
        )
    if spec.sigma == 0.0:
        return [StyleLatent(w_star.values) for _ in range(count)]
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lo, hi = partition.range_for(spec.granularity)
    out = []
    for _ in range(count):
        d = int(rng.integers(0, basis.count))
        beta = rng.uniform(-spec.sigma, spec.sigma)
        offset = beta * basis.eigenvalues[d] * basis.directions[d]
        out.append(add_block_delta(w_star, offset.astype(np.float32), (lo, hi)))
    return out


def sample_stylemix(
    w_star: StyleLatent,
    generator: GeneratorHandle,
    spec: PerturbationSpec,
    partition: BlockPartition,
    count: int,
    seed: int | None = None,
) -> list[StyleLatent]:
    """Swap one granularity band for the mapped rows of fresh noise."""
    _check_partition(w_star, partition)
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    z = generator.sample_z(spec.seed if seed is None else seed, count)
    rows = generator.map_rows(z)
    out = []
    for i in range(count):
        w_rand = StyleLatent(np.tile(rows[i], (w_star.blocks, 1)))
        out.append(style_mix(w_star, w_rand, spec.granularity, partition))
    return out


def sample_views(
    projection: ProjectionResult,
    generator: GeneratorHandle,
    spec: PerturbationSpec,
    count: int,
    basis: PCABasis | None = None,
    partition: BlockPartition | None = None,
) -> list[StyleLatent]:
    """Draw ``count`` perturbed latents around a projection, method-dispatched."""
    partition = partition or generator.spec.partition
    if spec.method == "isotropic":
        return sample_isotropic(projection.w_star, spec, partition, count)
    if spec.method == "pca":
        if basis is None:
            raise ValueError("pca perturbation requires a fitted basis")
        return sample_pca(projection.w_star, basis, spec, partition, count)
    return sample_stylemix(projection.w_star, generator, spec, partition, count)


def generate_views(
    projection: ProjectionResult,
    generator: GeneratorHandle,
    spec: PerturbationSpec,
    count: int,
    basis: PCABasis | None = None,
    partition: BlockPartition | None = None,
) -> np.ndarray:
    """Synthesize ``count`` perturbed views of a projected image, (N, C, H, W)."""
    latents = sample_views(projection, generator, spec, count, basis, partition)
    if not latents:
        s = generator.spec
        return np.empty((0, s.channels, s.resolution, s.resolution), dtype=np.float32)
    return generator.synthesize_batch(latents)
