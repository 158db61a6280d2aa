"""Procedural three-class shape dataset with labeled attributes.

Each sample is one anti-aliased shape (circle, square, or triangle) on a
uniform dark background, with jittered position, size, rotation, and
foreground color.  Besides the shape class every sample carries two binary
attributes -- ``bright_foreground`` and ``large`` -- and a foreground
bounding box computed by scanning the rendered pixels, so the alignment
stage has something real to undo.

Images are quantized to 8 bits at render time and stored as the quantized
values divided by 255, which makes the PNG round-trip bit-lossless.
Rendering is a pure function of (spec, split, index): regenerating any
sample from the manifest reproduces its pixels and labels exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeds import derive_rng

__all__ = [
    "SHAPE_CLASSES",
    "ATTRIBUTE_NAMES",
    "SPLIT_NAMES",
    "DatasetSpec",
    "SplitData",
    "ShapeDataset",
    "DatasetError",
    "render_sample",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

SHAPE_CLASSES = ("circle", "square", "triangle")
ATTRIBUTE_NAMES = ("bright_foreground", "large")
SPLIT_NAMES = ("train", "val", "test")

_SUPERSAMPLE = 4


class DatasetError(RuntimeError):
    """Dataset directory is missing, inconsistent, or incomplete."""

    def __init__(self, message: str, missing: list[str] | None = None) -> None:
        super().__init__(message)
        self.missing = missing or []


@dataclass(frozen=True)
class DatasetSpec:
    train: int = 2000
    val: int = 500
    test: int = 500
    resolution: int = 32
    channels: int = 3
    seed: int = 0
    position_jitter: float = 0.18
    small_size: tuple[float, float] = (0.14, 0.20)
    large_size: tuple[float, float] = (0.26, 0.34)
    dim_lum: tuple[float, float] = (0.40, 0.55)
    bright_lum: tuple[float, float] = (0.70, 0.95)
    hue_jitter: float = 0.30

    def __post_init__(self) -> None:
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("every split needs at least one sample")
        if self.channels != 3:
            raise ValueError("renderer produces 3-channel images")
        if self.resolution < 8:
            raise ValueError("resolution too small to draw shapes")

    def count(self, split: str) -> int:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return {"train": self.train, "val": self.val, "test": self.test}[split]

    def digest(self) -> str:
        text = json.dumps(
            {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self).items()},
            sort_keys=True,
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coverage(spec: DatasetSpec, shape: str, cx: float, cy: float, r: float, theta: float) -> np.ndarray:
    """Fraction of each pixel covered by the shape, via 4x supersampling."""
    res = spec.resolution
    n = res * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    px = xs - cx
    py = ys - cy
    if shape == "circle":
        inside = px * px + py * py <= r * r
    elif shape == "square":
        c, s = np.cos(theta), np.sin(theta)
        ux = c * px + s * py
        uy = -s * px + c * py
        inside = np.maximum(np.abs(ux), np.abs(uy)) <= r
    else:  # triangle: equilateral, circumradius r, vertex toward theta
        angles = theta + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        vx = r * np.cos(angles)
        vy = r * np.sin(angles)
        inside = np.ones_like(px, dtype=bool)
        for i in range(3):
            ex = vx[(i + 1) % 3] - vx[i]
            ey = vy[(i + 1) % 3] - vy[i]
            inside &= ex * (py - vy[i]) - ey * (px - vx[i]) >= 0
    cov = inside.astype(np.float64).reshape(res, _SUPERSAMPLE, res, _SUPERSAMPLE)
    return cov.mean(axis=(1, 3))


def render_sample(
    spec: DatasetSpec, split: str, index: int
) -> tuple[np.ndarray, int, dict[str, int], tuple[int, int, int, int]]:
    """Render one sample; returns (image, class label, attributes, bbox).

    The class cycles with the index so every split stays balanced; all other
    choices come from a per-sample generator, so the same (spec, split,
    index) always reproduces identical pixels and labels.
    """
    if not 0 <= index < spec.count(split):
        raise DatasetError(f"index {index} outside split {split!r} of size {spec.count(split)}")
    res = spec.resolution
    label = index % len(SHAPE_CLASSES)
    rng = derive_rng(spec.seed, "shapes", split, index)

    bg_base = rng.uniform(0.08, 0.18)
    bg = np.clip(bg_base + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    bright = int(rng.integers(0, 2))
    large = int(rng.integers(0, 2))
    lum = rng.uniform(*(spec.bright_lum if bright else spec.dim_lum))
    fg = np.clip(lum * (1.0 + rng.uniform(-spec.hue_jitter, spec.hue_jitter, size=3)), 0.0, 1.0)
    size_lo, size_hi = spec.large_size if large else spec.small_size
    r = rng.uniform(size_lo, size_hi) * res
    cx = res / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter) * res
    cy = res / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter) * res
    theta = rng.uniform(0.0, 2.0 * np.pi)

    cov = _coverage(spec, SHAPE_CLASSES[label], cx, cy, r, theta)
    img = bg[:, None, None] * (1.0 - cov[None]) + fg[:, None, None] * cov[None]
    img8 = np.round(img * 255.0).astype(np.uint8)
    bg8 = np.round(bg * 255.0).astype(np.uint8)

    touched = (img8 != bg8[:, None, None]).any(axis=0)
    rows = np.flatnonzero(touched.any(axis=1))
    cols = np.flatnonzero(touched.any(axis=0))
    if rows.size == 0:
        raise DatasetError(f"rendered shape invisible for {split}[{index}]")
    bbox = (
        int(cols[0]),
        int(rows[0]),
        int(cols[-1] - cols[0] + 1),
        int(rows[-1] - rows[0] + 1),
    )
    image = img8.astype(np.float32) / 255.0
    return image, label, {"bright_foreground": bright, "large": large}, bbox


@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 shape-class indices
    attributes: dict[str, np.ndarray]  # name -> (N,) int64 in {0, 1}
    bboxes: np.ndarray  # (N, 4) int64 rows of (x, y, w, h)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ShapeDataset:
    spec: DatasetSpec
    splits: dict[str, SplitData]

    def split(self, name: str) -> SplitData:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}")
        return self.splits[name]


def generate_dataset(spec: DatasetSpec, workers: int = 1) -> ShapeDataset:
    """Render every split; rendering is per-index pure, so ``workers`` only
    affects wall time, never content."""
    splits: dict[str, SplitData] = {}
    for split in SPLIT_NAMES:
        count = spec.count(split)
        images = np.empty((count, spec.channels, spec.resolution, spec.resolution), np.float32)
        labels = np.empty(count, np.int64)
        attrs = {name: np.empty(count, np.int64) for name in ATTRIBUTE_NAMES}
        bboxes = np.empty((count, 4), np.int64)
        ids = [f"{split}-{i:05d}" for i in range(count)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rendered = list(pool.map(lambda i: render_sample(spec, split, i), range(count)))
        else:
            rendered = [render_sample(spec, split, i) for i in range(count)]
        for i, (image, label, sample_attrs, bbox) in enumerate(rendered):
            images[i] = image
            labels[i] = label
            for name in ATTRIBUTE_NAMES:
                attrs[name][i] = sample_attrs[name]
            bboxes[i] = bbox
        splits[split] = SplitData(ids, images, labels, attrs, bboxes)
    return ShapeDataset(spec, splits)


def save_dataset(dataset: ShapeDataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLIT_NAMES:
        data = dataset.split(split)
        for i, image_id in enumerate(data.ids):
            filename = f"images/{image_id}.png"
            img8 = np.round(data.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(np.transpose(img8, (1, 2, 0))).save(out_dir / filename)
            x, y, w, h = (int(v) for v in data.bboxes[i])
            rows.append(
                {
                    "image_id": image_id,
                    "filename": filename,
                    "split": split,
                    "shape_class": SHAPE_CLASSES[int(data.labels[i])],
                    "bright_foreground": int(data.attributes["bright_foreground"][i]),
                    "large": int(data.attributes["large"][i]),
                    "bbox_x": x,
                    "bbox_y": y,
                    "bbox_w": w,
                    "bbox_h": h,
                }
            )
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    meta = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(dataset.spec).items()}
    meta["digest"] = dataset.spec.digest()
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(data_dir: str | Path) -> ShapeDataset:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    meta_path = data_dir / "dataset.json"
    if not manifest.is_file() or not meta_path.is_file():
        raise DatasetError(f"no dataset at {data_dir}")
    meta = json.loads(meta_path.read_text())
    meta.pop("digest", None)
    spec = DatasetSpec(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()}
    )
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))

    missing = [r["filename"] for r in rows if not (data_dir / r["filename"]).is_file()]
    if missing:
        raise DatasetError(
            f"{len(missing)} image files missing from {data_dir}", missing=missing
        )

    by_split: dict[str, list[dict]] = {name: [] for name in SPLIT_NAMES}
    for row in rows:
        if row["split"] not in by_split:
            raise DatasetError(f"manifest row has unknown split {row['split']!r}")
        by_split[row["split"]].append(row)

    splits: dict[str, SplitData] = {}
    for split, split_rows in by_split.items():
        count = len(split_rows)
        images = np.empty((count, spec.channels, spec.resolution, spec.resolution), np.float32)
        labels = np.empty(count, np.int64)
        attrs = {name: np.empty(count, np.int64) for name in ATTRIBUTE_NAMES}
        bboxes = np.empty((count, 4), np.int64)
        ids = []
        for i, row in enumerate(split_rows):
            with Image.open(data_dir / row["filename"]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            images[i] = np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
            labels[i] = SHAPE_CLASSES.index(row["shape_class"])
            for name in ATTRIBUTE_NAMES:
                attrs[name][i] = int(row[name])
            bboxes[i] = [int(row[k]) for k in ("bbox_x", "bbox_y", "bbox_w", "bbox_h")]
            ids.append(row["image_id"])
        splits[split] = SplitData(ids, images, labels, attrs, bboxes)
    return ShapeDataset(spec, splits)
