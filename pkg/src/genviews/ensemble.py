"""Weighted logit ensembling of a classifier over generated views.

The prediction for an image x with N generated views v_1..v_N is

    y = (1 - alpha) * C(x) + (alpha / N) * sum_n C(v_n)

on raw logits, never softmax outputs.  alpha=0 reproduces the plain
classifier bit-exactly and alpha=1 discards the original image in favor of
the view mean; both endpoints short-circuit so the guarantees hold to the
bit.  alpha is selected on a validation split by grid search, optionally
jointly with a reconstruction-distance cutoff that ensembles only images
whose projection reconstructed well (everything else falls back to the
plain prediction).

``bootstrap_stderr`` quantifies run-to-run variation by resampling ensemble
elements with replacement, matching how error bars are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EnsembleConfig",
    "LogitsRecord",
    "ensemble_logits",
    "ensembled_accuracy",
    "standard_accuracy",
    "select_alpha",
    "select_alpha_2d",
    "mixed_crop_ensemble",
    "bootstrap_stderr",
    "element_correctness",
    "EvalReport",
    "evaluate_split",
]

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float = 0.5
    views: int = 31
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    cutoff_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    bootstrap_resamples: int = 20
    bootstrap_seed: int = 0

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        _check_grid(self.alpha_grid)
        if any(not 0.0 <= p <= 1.0 for p in self.cutoff_grid):
            raise ValueError("cutoff percentiles must lie in [0, 1]")
        if list(self.cutoff_grid) != sorted(self.cutoff_grid):
            raise ValueError("cutoff grid must be sorted ascending")
        if self.views < 0:
            raise ValueError("views must be non-negative")


@dataclass
class LogitsRecord:
    """Cached classifier outputs for one image and its views."""

    image_id: str
    label: int
    image_logits: np.ndarray  # (L,)
    view_logits: np.ndarray  # (N, L)
    recon_distance: float | None = None

    def __post_init__(self) -> None:
        self.image_logits = np.asarray(self.image_logits)
        self.view_logits = np.asarray(self.view_logits)
        if self.image_logits.ndim != 1:
            raise ValueError("image_logits must be a 1-D logit vector")
        if self.view_logits.ndim != 2 or (
            self.view_logits.shape[0] > 0
            and self.view_logits.shape[1] != self.image_logits.shape[0]
        ):
            raise ValueError("view_logits must be (N, L) matching image_logits")


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _check_grid(grid: tuple[float, ...]) -> None:
    if not grid:
        raise ValueError("grid must be non-empty")
    for a in grid:
        _check_alpha(a)
    if list(grid) != sorted(grid):
        raise ValueError("grid must be sorted ascending")


def ensemble_logits(
    image_logits: np.ndarray, view_logits: np.ndarray, alpha: float
) -> np.ndarray:
    """Blend image logits with the view-mean logits at weight alpha."""
    _check_alpha(alpha)
    image_logits = np.asarray(image_logits)
    view_logits = np.asarray(view_logits)
    if alpha == 0.0:
        return image_logits.copy()
    if view_logits.shape[0] == 0:
        raise ValueError("alpha > 0 requires at least one view")
    view_mean = view_logits.mean(axis=0)
    if alpha == 1.0:
        return view_mean
    return (1.0 - alpha) * image_logits + alpha * view_mean


def standard_accuracy(records: list[LogitsRecord]) -> float:
    correct = sum(int(np.argmax(r.image_logits)) == r.label for r in records)
    return correct / len(records)


def ensembled_accuracy(
    records: list[LogitsRecord], alpha: float, threshold: float | None = None
) -> float:
    """Accuracy of the ensemble; below-threshold reconstruction distance gates it.

    With a threshold, only records whose ``recon_distance`` is at or below
    it are ensembled; the rest use the plain image logits.
    """
    if not records:
        raise ValueError("no records to evaluate")
    correct = 0
    for r in records:
        if threshold is not None and (
            r.recon_distance is None or r.recon_distance > threshold
        ):
            logits = r.image_logits
        else:
            logits = ensemble_logits(r.image_logits, r.view_logits, alpha)
        correct += int(np.argmax(logits)) == r.label
    return correct / len(records)


def select_alpha(
    records: list[LogitsRecord], grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the grid alpha maximizing accuracy; ties go to the smallest alpha."""
    _check_grid(grid)
    table = [(a, ensembled_accuracy(records, a)) for a in grid]
    best_alpha, _ = max(table, key=lambda t: (t[1], -t[0]))
    return best_alpha, table


def select_alpha_2d(
    records: list[LogitsRecord],
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID,
    cutoff_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
) -> tuple[float, float, np.ndarray]:
    """Joint grid search over alpha and a reconstruction-distance percentile.

    Percentile p converts to a distance threshold over the records: p=0
    ensembles nothing (every image keeps its plain prediction) and p=1
    ensembles everything, which reproduces the plain alpha search.  Ties
    prefer the smallest alpha, then the largest percentile.  Returns the
    winning (alpha, percentile) plus the full accuracy grid, indexed
    [alpha, percentile].
    """
    _check_grid(alpha_grid)
    if any(not 0.0 <= p <= 1.0 for p in cutoff_grid):
        raise ValueError("cutoff percentiles must lie in [0, 1]")
    distances = [r.recon_distance for r in records]
    if any(d is None for d in distances):
        raise ValueError("every record needs a reconstruction distance")
    dist = np.asarray(distances, dtype=np.float64)
    acc = np.zeros((len(alpha_grid), len(cutoff_grid)))
    # p=0 must gate out every record, so its threshold sits below all
    # distances; None would disable gating entirely.
    thresholds = [
        -np.inf if p == 0.0 else float(np.quantile(dist, p)) for p in cutoff_grid
    ]
    for i, a in enumerate(alpha_grid):
        for j, thr in enumerate(thresholds):
            acc[i, j] = ensembled_accuracy(records, a, threshold=thr)
    best = acc.max()
    winners = [
        (a, p)
        for i, a in enumerate(alpha_grid)
        for j, p in enumerate(cutoff_grid)
        if acc[i, j] == best
    ]
    alpha_star = min(a for a, _ in winners)
    pct_star = max(p for a, p in winners if a == alpha_star)
    return alpha_star, pct_star, acc


def mixed_crop_ensemble(
    image_crop_logits: np.ndarray, view_crop_logits: np.ndarray, alpha: float
) -> np.ndarray:
    """Blend mean logits of image crops with mean logits of view crops."""
    _check_alpha(alpha)
    image_crop_logits = np.asarray(image_crop_logits)
    view_crop_logits = np.asarray(view_crop_logits)
    if image_crop_logits.ndim != 2 or image_crop_logits.shape[0] == 0:
        raise ValueError("image_crop_logits must be a non-empty (K1, L) matrix")
    image_mean = image_crop_logits.mean(axis=0)
    if alpha == 0.0:
        return image_mean
    if view_crop_logits.ndim != 2 or view_crop_logits.shape[0] == 0:
        raise ValueError("alpha > 0 requires view crop logits")
    view_mean = view_crop_logits.mean(axis=0)
    if alpha == 1.0:
        return view_mean
    return (1.0 - alpha) * image_mean + alpha * view_mean


def bootstrap_stderr(
    correctness: np.ndarray, resamples: int = 20, seed: int = 0
) -> float:
    """Standard deviation of accuracy over element-resampled ensembles.

    ``correctness`` holds one row per ensemble element (a row may be a
    scalar or a vector of per-image correctness).  Each resample draws
    elements with replacement and scores their mean; the spread of those
    means is the reported uncertainty.  Constant input gives exactly zero.
    """
    arr = np.asarray(correctness, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("correctness must be a non-empty 1-D or 2-D array")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    rng = np.random.default_rng(seed)
    n = arr.shape[0]
    means = np.empty(resamples)
    for i in range(resamples):
        pick = rng.integers(0, n, size=n)
        means[i] = arr[pick].mean()
    return float(means.std())


def element_correctness(records: list[LogitsRecord]) -> np.ndarray:
    """Per-element, per-image correctness matrix: row 0 is the image itself."""
    if not records:
        raise ValueError("no records")
    n_views = records[0].view_logits.shape[0]
    out = np.zeros((1 + n_views, len(records)), dtype=np.float64)
    for j, r in enumerate(records):
        if r.view_logits.shape[0] != n_views:
            raise ValueError("records disagree on view count")
        out[0, j] = float(int(np.argmax(r.image_logits)) == r.label)
        for e in range(n_views):
            out[1 + e, j] = float(int(np.argmax(r.view_logits[e])) == r.label)
    return out


@dataclass
class EvalReport:
    alpha: float
    standard_acc: float
    ensembled_acc: float
    delta: float
    stderr: float
    threshold: float | None = None
    cutoff_percentile: float | None = None


def evaluate_split(
    records: list[LogitsRecord],
    config: EnsembleConfig,
    alpha: float | None = None,
    threshold: float | None = None,
    cutoff_percentile: float | None = None,
) -> EvalReport:
    """Score one split at a fixed alpha (default: the config's alpha)."""
    a = config.alpha if alpha is None else alpha
    std = standard_accuracy(records)
    ens = ensembled_accuracy(records, a, threshold=threshold)
    stderr = bootstrap_stderr(
        element_correctness(records),
        resamples=config.bootstrap_resamples,
        seed=config.bootstrap_seed,
    )
    return EvalReport(
        alpha=a,
        standard_acc=std,
        ensembled_acc=ens,
        delta=ens - std,
        stderr=stderr,
        threshold=threshold,
        cutoff_percentile=cutoff_percentile,
    )
