"""Gradient attacks, input corruptions, and a projection-based defense.

Attacks operate on pixels in [0, 1] under an l-infinity budget epsilon:

* ``fgsm`` takes a single signed-gradient step of size epsilon;
* ``pgd`` iterates smaller signed-gradient steps, re-projecting onto the
  epsilon ball around the original after every step.

Both share one step primitive, so PGD with a single step of size epsilon is
bit-identical to FGSM.  There is no random start: attacks are deterministic
functions of (classifier, image, label, settings).

``defend_and_ensemble`` is the recovery path: it never sees the clean
image.  The corrupted input is projected through the generator, and the
classifier votes over the reconstruction and style-mixed views of it,
optionally combined with plain crop augmentation of the corrupted input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .classifier import ClassifierHandle, color_jitter, random_resized_crops
from .ensemble import ensemble_logits, mixed_crop_ensemble
from .generator import GeneratorHandle
from .perturb import PCABasis, PerturbationSpec, generate_views
from .projection import Encoder, ProjectionConfig, project
from .seeds import derive_rng

__all__ = [
    "AttackConfig",
    "fgsm",
    "pgd",
    "corrupt",
    "choose_epsilon",
    "DEFENSE_CONDITIONS",
    "defend_and_ensemble",
]

# The epsilon ladder evaluated when picking an attack budget, in pixel units.
EPSILON_GRID = (2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0)

DEFENSE_CONDITIONS = (
    "image",
    "reconstruction",
    "stylemix_ensemble",
    "combined_ensemble",
)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"  # "fgsm" | "pgd"
    epsilon: float = 8.0 / 255.0
    steps: int = 10
    step_size: float = 2.0 / 255.0

    def __post_init__(self) -> None:
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


def _grad_sign_step(
    classifier: ClassifierHandle, x: torch.Tensor, label: int, step: float
) -> torch.Tensor:
    """One ascent step on the classification loss: x + step * sign(grad)."""
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(
        classifier.logits_t(x), torch.tensor([label], dtype=torch.int64)
    )
    (grad,) = torch.autograd.grad(loss, x)
    return (x.detach() + step * torch.sign(grad)).clamp(0.0, 1.0)


def _enforce_ball(adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Repair float32 rounding so measured |adv - x| never exceeds epsilon.

    Adding a budget-sized offset and re-measuring the difference each round
    in float32 can overshoot by an ulp; nudging offenders one representable
    value toward x converges in a couple of passes and preserves [0, 1].
    """
    for _ in range(4):
        delta = adv - x
        over = np.abs(delta) > epsilon
        if not over.any():
            return adv
        pulled = (x + np.clip(delta, -epsilon, epsilon)).astype(np.float32)
        adv = np.where(over, pulled, adv)
        delta = adv - x
        over = np.abs(delta) > epsilon
        adv = np.where(over, np.nextafter(adv, x, dtype=np.float32), adv)
    assert not (np.abs(adv - x) > epsilon).any()
    return adv


def pgd(
    classifier: ClassifierHandle, image: np.ndarray, label: int, config: AttackConfig
) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the epsilon ball."""
    image = np.asarray(image, dtype=np.float32)
    if config.epsilon == 0.0:
        return image.copy()
    x0 = torch.from_numpy(image[None])
    lo = (x0 - config.epsilon).clamp(0.0, 1.0)
    hi = (x0 + config.epsilon).clamp(0.0, 1.0)
    x = x0
    for _ in range(config.steps):
        x = _grad_sign_step(classifier, x, label, config.step_size)
        x = torch.min(torch.max(x, lo), hi)
    return _enforce_ball(x[0].numpy(), image, config.epsilon)


def fgsm(
    classifier: ClassifierHandle, image: np.ndarray, label: int, epsilon: float
) -> np.ndarray:
    """Single full-budget signed-gradient step: PGD with one step of size epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    image = np.asarray(image, dtype=np.float32)
    if epsilon == 0.0:
        return image.copy()
    cfg = AttackConfig(kind="pgd", epsilon=epsilon, steps=1, step_size=epsilon)
    return pgd(classifier, image, label, cfg)


def attack(
    classifier: ClassifierHandle, image: np.ndarray, label: int, config: AttackConfig
) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(classifier, image, label, config.epsilon)
    return pgd(classifier, image, label, config)


def corrupt(image: np.ndarray, kind: str, sigma: float, seed: int = 0) -> np.ndarray:
    """Common-corruption transform: gaussian blur or additive gaussian noise.

    ``sigma`` is the blur radius or the noise standard deviation in pixel
    units; zero returns the input unchanged.
    """
    image = np.asarray(image, dtype=np.float32)
    if kind not in ("gaussian_blur", "gaussian_noise"):
        raise ValueError(f"unknown corruption kind {kind!r}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return image.copy()
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        noisy = image + sigma * rng.standard_normal(image.shape).astype(np.float32)
        return np.clip(noisy, 0.0, 1.0)
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    k = torch.from_numpy(kernel.astype(np.float32))
    t = torch.from_numpy(image[None])
    c = t.shape[1]
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1).contiguous()
    t = F.pad(t, (0, 0, radius, radius), mode="reflect")
    t = F.conv2d(t, kv, groups=c)
    t = F.pad(t, (radius, radius, 0, 0), mode="reflect")
    t = F.conv2d(t, kv.transpose(2, 3).contiguous(), groups=c)
    return t[0].clamp(0.0, 1.0).numpy()


def choose_epsilon(
    classifier: ClassifierHandle,
    images: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
    min_drop: float = 0.20,
    grid: tuple[float, ...] = EPSILON_GRID,
) -> tuple[float, list[tuple[float, float]]]:
    """Smallest grid epsilon whose attack costs at least ``min_drop`` accuracy.

    Falls back to the largest grid value when no budget reaches the drop.
    Returns the chosen epsilon and the (epsilon, attacked accuracy) table.
    """
    clean_pred = classifier.predict_batch(images).argmax(axis=1)
    clean_acc = float((clean_pred == labels).mean())
    table: list[tuple[float, float]] = []
    chosen: float | None = None
    for eps in grid:
        cfg = AttackConfig(
            kind=config.kind,
            epsilon=eps,
            steps=config.steps,
            step_size=min(config.step_size, eps),
        )
        adv = np.stack(
            [attack(classifier, images[i], int(labels[i]), cfg) for i in range(len(images))]
        )
        acc = float((classifier.predict_batch(adv).argmax(axis=1) == labels).mean())
        table.append((eps, acc))
        if chosen is None and clean_acc - acc >= min_drop:
            chosen = eps
    return (chosen if chosen is not None else grid[-1]), table


def defend_and_ensemble(
    corrupted: np.ndarray,
    generator: GeneratorHandle,
    encoder: Encoder,
    classifier: ClassifierHandle,
    spec: PerturbationSpec,
    views: int,
    alpha: float,
    proj_config: ProjectionConfig,
    basis: PCABasis | None = None,
    crops: int = 16,
    crop_seed: int = 0,
    image_id: str = "0",
) -> dict[str, np.ndarray]:
    """Classify a corrupted image through its projection, four ways.

    Returns logits per condition: the corrupted image alone, its generator
    reconstruction, the style-perturbed view ensemble at ``alpha``, and the
    combined ensemble of augmented image crops with view crops.  Only the
    corrupted pixels ever enter; recovery must come from the generator
    prior, not from access to the clean image.
    """
    corrupted = np.asarray(corrupted, dtype=np.float32)
    result = project(
        corrupted, None, generator, proj_config, encoder=encoder, image_id=image_id
    )
    recon = generator.synthesize(result.w_star)
    view_images = generate_views(result, generator, spec, views, basis=basis)

    image_logits = classifier.predict_logits(corrupted)
    recon_logits = classifier.predict_logits(recon)
    view_logits = classifier.predict_batch(view_images)
    ens_logits = ensemble_logits(image_logits, view_logits, alpha)

    rng = derive_rng(crop_seed, "defense-crops", image_id)
    img_batch = torch.from_numpy(np.repeat(corrupted[None], crops, axis=0))
    img_crops = random_resized_crops(img_batch, rng, classifier.config.crop_scale)
    img_crops = color_jitter(img_crops, rng, brightness=0.2, contrast=0.2)
    img_crop_logits = classifier.predict_batch(img_crops.numpy())
    pool = view_images if views > 0 else recon[None]
    pick = rng.integers(0, pool.shape[0], size=crops)
    view_batch = torch.from_numpy(pool[pick])
    view_crops = random_resized_crops(view_batch, rng, classifier.config.crop_scale)
    view_crop_logits = classifier.predict_batch(view_crops.numpy())
    combined = mixed_crop_ensemble(img_crop_logits, view_crop_logits, alpha)

    return {
        "image": image_logits,
        "reconstruction": recon_logits,
        "stylemix_ensemble": ens_logits,
        "combined_ensemble": combined,
    }
