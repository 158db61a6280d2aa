"""Pluggable image classifier with seeded augmentation and view finetuning.

The default architecture is a small four-stage convolutional network, but
every consumer goes through ``ClassifierHandle``, which wraps any torch
module with the same (K, C, H, W) -> (K, L) contract.  Training minimizes
cross-entropy with random horizontal flips and random resized crops, early
stops on validation accuracy, and returns the best-validation checkpoint.

``finetune_on_views`` continues training from an existing classifier while
replacing whole batches with generated data (reconstructions or perturbed
views of the training images) at a configured probability, at a typically
much lower learning rate.  A mixing ratio of zero never synthesizes
anything and is bit-identical to training on originals only.

All augmentation randomness comes from named numpy generators, so a fixed
config reproduces identical weights.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import read_container, write_container
from .generator import GeneratorHandle
from .perturb import PCABasis, PerturbationSpec, generate_views
from .projection import ProjectionResult
from .seeds import derive_rng, derive_seed

__all__ = [
    "ClassifierConfig",
    "TrainSource",
    "TrainDataError",
    "LabeledImages",
    "ClassifierHandle",
    "augment_batch",
    "random_resized_crops",
    "train",
    "finetune_on_views",
]


@dataclass(frozen=True)
class ClassifierConfig:
    classes: int
    resolution: int
    channels: int = 3
    width: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 5
    seed: int = 0
    hflip: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least two classes")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("epochs and patience must be non-negative")

    def digest(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(vars(self).items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TrainSource:
    """Where training pixels come from: originals, reconstructions, or views."""

    kind: str = "real"  # "real" | "reconstruction" | "perturbed"
    spec: PerturbationSpec | None = None
    mix_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("real", "reconstruction", "perturbed"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.kind == "perturbed" and self.spec is None:
            raise ValueError("perturbed source needs a perturbation spec")


class TrainDataError(RuntimeError):
    """Training inputs are inconsistent; lists any missing projections."""

    def __init__(self, message: str, missing: list[str] | None = None) -> None:
        super().__init__(message)
        self.missing = missing or []


@dataclass
class LabeledImages:
    ids: list[str]
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.ids) != self.images.shape[0] or len(self.ids) != self.labels.shape[0]:
            raise TrainDataError("ids, images, and labels must align")

    def __len__(self) -> int:
        return len(self.ids)


class _ConvNet(nn.Module):
    """Four conv stages with pooling, then a pooled linear head."""

    def __init__(self, config: ClassifierConfig) -> None:
        super().__init__()
        widths = [config.width, 2 * config.width, 4 * config.width, 4 * config.width]
        layers: list[nn.Module] = []
        ch_in = config.channels
        res = config.resolution
        for w in widths:
            layers += [nn.Conv2d(ch_in, w, 3, padding=1), nn.ReLU()]
            if res > 2:
                layers.append(nn.MaxPool2d(2))
                res //= 2
            ch_in = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1] * 4, config.classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, 2)
        return self.head(h.flatten(1))


class ClassifierHandle:
    """Uniform prediction interface around a torch classification module."""

    def __init__(self, config: ClassifierConfig, net: nn.Module | None = None) -> None:
        self.config = config
        if net is None:
            torch.manual_seed(config.seed)
            net = _ConvNet(config)
        self.net = net
        self.net.eval()

    def logits_t(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable logits; the attack code backpropagates through this."""
        return self.net(x)

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ValueError(f"image batch must be (K, C, H, W), got {images.shape}")
        outs = []
        with torch.no_grad():
            for start in range(0, images.shape[0], 256):
                chunk = torch.from_numpy(images[start : start + 256])
                outs.append(self.net(chunk).numpy())
        return np.concatenate(outs) if outs else np.empty((0, self.config.classes), np.float32)

    def predict_logits(self, image: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(image)[None])[0]

    def predict_crops(
        self,
        image: np.ndarray,
        count: int,
        seed: int,
        scale: tuple[float, float] | None = None,
    ) -> np.ndarray:
        """Logits for ``count`` random resized crops of one image, (count, L)."""
        if count < 1:
            raise ValueError("count must be positive")
        rng = np.random.default_rng(seed)
        batch = torch.from_numpy(np.repeat(np.asarray(image, np.float32)[None], count, axis=0))
        crops = random_resized_crops(batch, rng, scale or self.config.crop_scale)
        with torch.no_grad():
            return self.net(crops).numpy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode("utf-8"))
            h.update(tensor.detach().to(torch.float32).numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {
            "config": {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in vars(self.config).items()
            },
            "digest": self.config.digest(),
        }
        meta.update(extra_meta or {})
        arrays = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        write_container(path, "classifier", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierHandle":
        meta, arrays = read_container(path, expect_kind="classifier")
        fields = {
            k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()
        }
        handle = cls(ClassifierConfig(**fields))
        handle.net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        handle.net.eval()
        return handle


def random_resized_crops(
    images: torch.Tensor, rng: np.random.Generator, scale: tuple[float, float]
) -> torch.Tensor:
    """Per-image square crop with area in ``scale``, resized back to full size.

    A full-size crop at the origin is passed through untouched, so the
    identity setting scale=(1, 1) returns the input bit-exactly.
    """
    k, _, h, w = images.shape
    out = torch.empty_like(images)
    for i in range(k):
        s = rng.uniform(scale[0], scale[1])
        side = max(1, round(h * float(np.sqrt(s))))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        if side == h and top == 0 and left == 0:
            out[i] = images[i]
            continue
        crop = images[i : i + 1, :, top : top + side, left : left + side]
        out[i] = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0]
    return out


def color_jitter(
    images: torch.Tensor, rng: np.random.Generator, brightness: float, contrast: float
) -> torch.Tensor:
    k = images.shape[0]
    b = torch.from_numpy(rng.uniform(1 - brightness, 1 + brightness, size=k).astype(np.float32))
    c = torch.from_numpy(rng.uniform(1 - contrast, 1 + contrast, size=k).astype(np.float32))
    mean = images.mean(dim=(1, 2, 3), keepdim=True)
    out = (images - mean) * c[:, None, None, None] + mean
    return (out * b[:, None, None, None]).clamp(0.0, 1.0)


def augment_batch(
    images: torch.Tensor, rng: np.random.Generator, config: ClassifierConfig
) -> torch.Tensor:
    out = random_resized_crops(images, rng, config.crop_scale)
    if config.hflip:
        flips = rng.integers(0, 2, size=out.shape[0])
        if flips.any():
            sel = torch.from_numpy(np.flatnonzero(flips))
            out[sel] = torch.flip(out[sel], dims=[3])
    return out


def _reconstruction_bank(
    data: LabeledImages,
    projections: dict[str, ProjectionResult],
    generator: GeneratorHandle,
) -> np.ndarray:
    missing = [i for i in data.ids if i not in projections]
    if missing:
        raise TrainDataError(
            f"{len(missing)} training images have no cached projection", missing=missing
        )
    latents = np.stack([projections[i].w_star.values for i in data.ids])
    out = np.empty_like(data.images)
    for start in range(0, latents.shape[0], 64):
        out[start : start + 64] = generator.synthesize_batch(latents[start : start + 64])
    return out


def _perturbed_batch(
    ids: Sequence[str],
    projections: dict[str, ProjectionResult],
    generator: GeneratorHandle,
    spec: PerturbationSpec,
    basis: PCABasis | None,
    epoch: int,
    root_seed: int,
) -> np.ndarray:
    views = [
        generate_views(
            projections[i],
            generator,
            PerturbationSpec(
                method=spec.method,
                granularity=spec.granularity,
                sigma=spec.sigma,
                seed=derive_seed(root_seed, "train-view", epoch, i),
            ),
            1,
            basis=basis,
        )[0]
        for i in ids
    ]
    return np.stack(views)


def _evaluate_accuracy(net: nn.Module, data: LabeledImages) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(data), 256):
            chunk = torch.from_numpy(data.images[start : start + 256])
            pred = net(chunk).argmax(dim=1).numpy()
            correct += int((pred == data.labels[start : start + 256]).sum())
    return correct / len(data)


def _fit(
    handle: ClassifierHandle,
    data: LabeledImages,
    val: LabeledImages,
    config: ClassifierConfig,
    batch_images: "callable",
) -> list[dict]:
    """Shared epoch loop: early stopping on validation accuracy, best kept."""
    net = handle.net
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    aug_rng = derive_rng(config.seed, "augment")
    order_rng = derive_rng(config.seed, "batch-order")
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_val = -1.0
    stale = 0
    curve: list[dict] = []
    for epoch in range(config.max_epochs):
        net.train()
        perm = order_rng.permutation(len(data))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(data), config.batch_size):
            idx = perm[start : start + config.batch_size]
            images = batch_images(idx, epoch)
            x = augment_batch(torch.from_numpy(images), aug_rng, config)
            y = torch.from_numpy(data.labels[idx])
            loss = F.cross_entropy(net(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        net.eval()
        val_acc = _evaluate_accuracy(net, val)
        curve.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_acc": val_acc}
        )
        if val_acc > best_val:
            best_val = val_acc
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return curve


def train(
    data: LabeledImages,
    val: LabeledImages,
    source: TrainSource,
    config: ClassifierConfig,
    generator: GeneratorHandle | None = None,
    projections: dict[str, ProjectionResult] | None = None,
    basis: PCABasis | None = None,
) -> tuple[ClassifierHandle, list[dict]]:
    """Train a fresh classifier; the source decides what pixels it sees.

    ``real`` trains on the original images.  ``reconstruction`` trains on
    the synthesized projections of the training set; ``perturbed`` resamples
    one view per image per epoch.  Both generated kinds require a projection
    for every training id and raise ``TrainDataError`` listing any missing.
    Zero epochs returns the freshly initialized network.
    """
    handle = ClassifierHandle(config)
    if source.kind == "real":
        batch_images = lambda idx, epoch: data.images[idx]
    else:
        if generator is None or projections is None:
            raise TrainDataError(f"{source.kind} source requires generator and projections")
        if source.kind == "reconstruction":
            bank = _reconstruction_bank(data, projections, generator)
            batch_images = lambda idx, epoch: bank[idx]
        else:
            missing = [i for i in data.ids if i not in projections]
            if missing:
                raise TrainDataError(
                    f"{len(missing)} training images have no cached projection",
                    missing=missing,
                )
            assert source.spec is not None
            batch_images = lambda idx, epoch: _perturbed_batch(
                [data.ids[i] for i in idx],
                projections,
                generator,
                source.spec,
                basis,
                epoch,
                config.seed,
            )
    curve = _fit(handle, data, val, config, batch_images)
    return handle, curve


def finetune_on_views(
    classifier: ClassifierHandle,
    data: LabeledImages,
    val: LabeledImages,
    projections: dict[str, ProjectionResult],
    source: TrainSource,
    config: ClassifierConfig,
    generator: GeneratorHandle,
    basis: PCABasis | None = None,
) -> tuple[ClassifierHandle, list[dict]]:
    """Continue training, swapping whole batches for generated data.

    Each batch is generated with probability ``source.mix_ratio`` (kind
    ``reconstruction`` or ``perturbed``) and taken from the originals
    otherwise.  Ratio 0 never synthesizes an image; ratio 1 never shows an
    original.  Runs at ``config.lr``, which callers set well below the
    original training rate.
    """
    if source.kind == "real":
        raise TrainDataError("finetune source must be reconstruction or perturbed")
    missing = [i for i in data.ids if i not in projections]
    if missing and source.mix_ratio > 0:
        raise TrainDataError(
            f"{len(missing)} training images have no cached projection", missing=missing
        )
    handle = ClassifierHandle(config, net=copy.deepcopy(classifier.net))
    mix_rng = derive_rng(config.seed, "mix")
    bank: np.ndarray | None = None

    def batch_images(idx: np.ndarray, epoch: int) -> np.ndarray:
        nonlocal bank
        use_generated = mix_rng.random() < source.mix_ratio
        if not use_generated:
            return data.images[idx]
        if source.kind == "reconstruction":
            if bank is None:
                bank = _reconstruction_bank(data, projections, generator)
            return bank[idx]
        assert source.spec is not None
        return _perturbed_batch(
            [data.ids[i] for i in idx],
            projections,
            generator,
            source.spec,
            basis,
            epoch,
            config.seed,
        )

    curve = _fit(handle, data, val, config, batch_images)
    return handle, curve
