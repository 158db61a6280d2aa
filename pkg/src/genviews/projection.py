"""Image-to-latent projection: alignment, encoder, iterative optimization.

Pipeline for one image: shift the foreground bounding box to the canvas
center and record which pixels are valid after the shift (`align_and_mask`),
predict an initial latent with a trained encoder, then minimize

    masked reconstruction loss + lam * mean((w - w_init)^2)

over the latent with a batched quasi-Newton optimizer.  The latent penalty
anchors the solution near the encoder's prediction, which keeps the latent
on-manifold; because the penalty is zero at the initial point and steps are
only accepted on sufficient decrease, the final reconstruction loss can
never exceed the initial one.

The encoder is trained on generator samples only: draw z, synthesize
x = G(w(z)), and regress the latent back from pixels with the same
reconstruction loss plus a latent-consistency term.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import read_container, write_container
from .generator import GeneratorHandle, GeneratorSpec, mean_w, sample_z
from .latent import StyleLatent, default_partition
from .lbfgs import minimize_adam, minimize_lbfgs
from .metrics import MetricConfig, image_loss_t
from .seeds import derive_rng

__all__ = [
    "AlignmentTransform",
    "align_and_mask",
    "shift_image",
    "Encoder",
    "EncoderTrainConfig",
    "EncoderTrainingError",
    "train_encoder",
    "encode",
    "ProjectionConfig",
    "ProjectionResult",
    "project",
    "project_batch",
    "write_projection_log",
]

_FILL_VALUE = 0.5


@dataclass(frozen=True)
class AlignmentTransform:
    """Integer shift applied to center an image, plus its validity mask."""

    dx: int
    dy: int
    mask: np.ndarray  # (H, W) float32, 1 where pixels are real


def shift_image(
    image: np.ndarray, dx: int, dy: int, fill: float = _FILL_VALUE
) -> tuple[np.ndarray, np.ndarray]:
    """Translate (C, H, W) pixels by (dx, dy); returns (shifted, valid mask)."""
    c, h, w = image.shape
    out = np.full_like(image, fill)
    mask = np.zeros((h, w), dtype=np.float32)
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    if src_y.stop > src_y.start and src_x.stop > src_x.start:
        out[:, dst_y, dst_x] = image[:, src_y, src_x]
        mask[dst_y, dst_x] = 1.0
    return out, mask


def align_and_mask(
    image: np.ndarray, bbox: tuple[int, int, int, int]
) -> tuple[np.ndarray, AlignmentTransform]:
    """Center the bbox on the canvas; vacated pixels get a zero mask.

    ``bbox`` is (x, y, w, h) in pixels.  An already centered bbox yields the
    identity shift and an all-ones mask.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {image.shape}")
    _, h, w = image.shape
    bx, by, bw, bh = (int(v) for v in bbox)
    if bw < 1 or bh < 1:
        raise ValueError(f"empty bounding box {bbox}")
    if bx < 0 or by < 0 or bx + bw > w or by + bh > h:
        raise ValueError(f"bounding box {bbox} outside {w}x{h} image")
    dx = round(w / 2.0 - (bx + bw / 2.0))
    dy = round(h / 2.0 - (by + bh / 2.0))
    shifted, mask = shift_image(image, dx, dy)
    return shifted, AlignmentTransform(dx=dx, dy=dy, mask=mask)


class _EncoderNet(nn.Module):
    """Stride-2 conv stack from image resolution down to 4, then a linear head."""

    def __init__(self, spec: GeneratorSpec, width: int) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        ch_in = spec.channels
        ch = width
        res = spec.resolution
        while res > 4:
            layers += [nn.Conv2d(ch_in, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in = ch
            ch = min(2 * ch, 128)
            res //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch_in * res * res, spec.blocks * spec.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1))


@dataclass(frozen=True)
class EncoderTrainConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    lam: float = 1.0
    width: int = 32
    seed: int = 0
    metric: MetricConfig = field(default_factory=MetricConfig)
    log_interval: int = 25

    def digest(self) -> str:
        fields = {k: v for k, v in vars(self).items() if k != "metric"}
        fields.update({f"metric.{k}": v for k, v in vars(self.metric).items()})
        text = ",".join(f"{k}={v}" for k, v in sorted(fields.items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EncoderTrainingError(RuntimeError):
    """Encoder training loss went non-finite."""


class Encoder:
    """Image to latent-stack predictor, tied to one generator's shape spec."""

    def __init__(self, spec: GeneratorSpec, width: int = 32, seed: int = 0) -> None:
        self.spec = spec
        self.width = width
        torch.manual_seed(seed)
        self.net = _EncoderNet(spec, width)
        self.net.eval()

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        expected = (self.spec.channels, self.spec.resolution, self.spec.resolution)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ValueError(f"image batch must be (K, {expected}), got {images.shape}")
        with torch.no_grad():
            out = self.net(torch.from_numpy(images))
        return out.numpy().reshape(-1, self.spec.blocks, self.spec.latent_dim)

    def encode(self, image: np.ndarray) -> StyleLatent:
        return StyleLatent(self.encode_batch(np.asarray(image)[None])[0])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode("utf-8"))
            h.update(tensor.detach().to(torch.float32).numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {
            "blocks": self.spec.blocks,
            "latent_dim": self.spec.latent_dim,
            "resolution": self.spec.resolution,
            "channels": self.spec.channels,
            "width": self.width,
        }
        meta.update(extra_meta or {})
        arrays = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        write_container(path, "encoder", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        meta, arrays = read_container(path, expect_kind="encoder")
        spec = GeneratorSpec(
            blocks=meta["blocks"],
            latent_dim=meta["latent_dim"],
            resolution=meta["resolution"],
            channels=meta["channels"],
            partition=default_partition(meta["blocks"]),
        )
        enc = cls(spec, width=meta["width"])
        enc.net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return enc


def encode(encoder: Encoder, image: np.ndarray) -> StyleLatent:
    return encoder.encode(image)


def train_encoder(
    generator: GeneratorHandle, config: EncoderTrainConfig
) -> tuple[Encoder, list[dict]]:
    """Fit an encoder to invert ``generator`` on its own samples.

    Optimizes reconstruction loss of G(E(x)) against x plus
    ``lam * mean((w - E(x))^2)`` where w is the latent that produced x.
    Zero steps returns the freshly initialized encoder.
    """
    spec = generator.spec
    encoder = Encoder(spec, width=config.width, seed=config.seed)
    if config.steps == 0:
        return encoder, []
    encoder.net.train()
    dtype = generator.torch_dtype()
    net = encoder.net.to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = derive_rng(config.seed, "encoder-batches")
    ones_mask = torch.ones(
        (config.batch_size, 1, spec.resolution, spec.resolution), dtype=dtype
    )
    metrics: list[dict] = []
    for step in range(config.steps):
        z = rng.standard_normal((config.batch_size, spec.latent_dim)).astype(np.float32)
        rows = generator.map_rows(z)
        w_true = torch.from_numpy(np.repeat(rows[:, None, :], spec.blocks, axis=1)).to(dtype)
        with torch.no_grad():
            x = generator.synthesize_t(w_true)
        pred = net(x).reshape(-1, spec.blocks, spec.latent_dim)
        y = generator.synthesize_t(pred)
        recon, _, _ = image_loss_t(x, y, ones_mask, config.metric)
        latent_term = ((w_true - pred) ** 2).mean(dim=(1, 2))
        loss = (recon + config.lam * latent_term).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if not torch.isfinite(loss):
            raise EncoderTrainingError(f"encoder training diverged at step {step}")
        if step % config.log_interval == 0 or step == config.steps - 1:
            metrics.append(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    "recon": float(recon.detach().mean()),
                    "latent": float(latent_term.detach().mean()),
                }
            )
    net.to(torch.float32)
    encoder.net.eval()
    return encoder, metrics


@dataclass(frozen=True)
class ProjectionConfig:
    """Settings for iterative latent optimization."""

    lam: float = 0.5
    steps: int = 500
    optimizer: str = "lbfgs"  # "lbfgs" | "adam"
    history: int = 10
    init: str = "encoder"  # "encoder" | "mean_w" | "zeros"
    metric: MetricConfig = field(default_factory=MetricConfig)
    mean_w_samples: int = 256
    mean_w_seed: int = 0
    adam_lr: float = 0.05
    max_backtracks: int = 30
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("encoder", "mean_w", "zeros"):
            raise ValueError(f"unknown init mode {self.init!r}")

    def digest(self, generator: GeneratorHandle, encoder: Encoder | None = None) -> bytes:
        """32-byte identity of (projection settings, generator, encoder)."""
        fields = {k: v for k, v in vars(self).items() if k != "metric"}
        fields.update({f"metric.{k}": v for k, v in vars(self.metric).items()})
        text = ",".join(f"{k}={v}" for k, v in sorted(fields.items()))
        h = hashlib.sha256()
        h.update(text.encode("utf-8"))
        h.update(generator.fingerprint().encode("utf-8"))
        if self.init == "encoder":
            if encoder is None:
                raise ValueError("encoder init requires an encoder")
            h.update(encoder.fingerprint().encode("utf-8"))
        return h.digest()


@dataclass
class ProjectionResult:
    """One projected image: optimal latent plus loss breakdown."""

    image_id: str
    w_star: StyleLatent
    l1_term: float
    perceptual_term: float
    latent_term: float
    steps_used: int
    config_digest: bytes
    w_init: StyleLatent | None = None
    init_image_loss: float | None = None
    mask: np.ndarray | None = None

    @property
    def image_loss(self) -> float:
        return self.l1_term + self.perceptual_term

    @property
    def total_loss(self) -> float:
        return self.image_loss + self.latent_term


def _initial_latents(
    images: np.ndarray,
    generator: GeneratorHandle,
    config: ProjectionConfig,
    encoder: Encoder | None,
) -> np.ndarray:
    count = images.shape[0]
    spec = generator.spec
    if config.init == "encoder":
        if encoder is None:
            raise ValueError("encoder init requires an encoder")
        return encoder.encode_batch(images)
    if config.init == "mean_w":
        center = mean_w(generator, config.mean_w_samples, config.mean_w_seed)
        return np.repeat(center.values[None], count, axis=0)
    return np.zeros((count, spec.blocks, spec.latent_dim), dtype=np.float32)


def project_batch(
    images: np.ndarray,
    masks: np.ndarray | None,
    generator: GeneratorHandle,
    config: ProjectionConfig,
    encoder: Encoder | None = None,
    image_ids: Sequence[str] | None = None,
) -> list[ProjectionResult]:
    """Project a batch of images; each optimization is independent.

    ``masks`` is (M, H, W) or None for all-valid pixels.  Results report the
    loss breakdown re-evaluated at the stored float32 latent, so a cached
    latent reproduces its recorded losses exactly.  If rounding or a stalled
    search ever left a latent no better than its initialization, the
    initialization itself is returned, keeping the reconstruction loss
    non-increasing unconditionally.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"images must be (M, C, H, W), got shape {images.shape}")
    count = images.shape[0]
    spec = generator.spec
    if masks is None:
        masks = np.ones((count,) + images.shape[2:], dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    if masks.shape != (count,) + images.shape[2:]:
        raise ValueError(f"masks shape {masks.shape} does not match images")
    if image_ids is None:
        image_ids = [str(i) for i in range(count)]
    if len(image_ids) != count:
        raise ValueError("one image id per image required")

    dtype = generator.torch_dtype()
    digest = config.digest(generator, encoder)
    w0 = _initial_latents(images, generator, config, encoder).astype(np.float32)
    x_t = torch.from_numpy(images).to(dtype)
    m_t = torch.from_numpy(masks[:, None]).to(dtype)
    w_init_t = torch.from_numpy(w0).to(dtype)
    n_dim = spec.blocks * spec.latent_dim

    def term_breakdown(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with torch.no_grad():
            w = torch.from_numpy(latents.reshape(count, spec.blocks, spec.latent_dim)).to(dtype)
            y = generator.synthesize_t(w)
            _, l1, percep = image_loss_t(x_t, y, m_t, config.metric)
            lat = ((w - w_init_t) ** 2).mean(dim=(1, 2))
        return (
            l1.to(torch.float64).numpy(),
            percep.to(torch.float64).numpy(),
            lat.to(torch.float64).numpy(),
        )

    def objective(x: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # float32 generators see float32-rounded iterates, so recorded
        # losses match what the stored latent reproduces.
        w = (
            torch.from_numpy(x.copy())
            .to(dtype)
            .reshape(len(idx), spec.blocks, spec.latent_dim)
            .requires_grad_(True)
        )
        rows = torch.from_numpy(idx)
        y = generator.synthesize_t(w)
        total, _, _ = image_loss_t(x_t[rows], y, m_t[rows], config.metric)
        lat = ((w - w_init_t[rows]) ** 2).mean(dim=(1, 2))
        per_image = total + config.lam * lat
        per_image.sum().backward()
        assert w.grad is not None
        f = per_image.detach().to(torch.float64).numpy()
        g = w.grad.reshape(len(idx), -1).to(torch.float64).numpy()
        return f, g

    x0 = w0.reshape(count, n_dim).astype(np.float64)
    if config.steps == 0:
        steps_taken = np.zeros(count, dtype=np.int64)
        final = w0.reshape(count, n_dim)
    elif config.optimizer == "lbfgs":
        res = minimize_lbfgs(
            objective,
            x0,
            steps=config.steps,
            history=config.history,
            max_backtracks=config.max_backtracks,
        )
        steps_taken = res.steps
        final = res.x.astype(np.float32)
    else:
        res = minimize_adam(objective, x0, steps=config.steps, lr=config.adam_lr)
        steps_taken = res.steps
        final = res.x.astype(np.float32)

    l1_0, percep_0, _ = term_breakdown(w0.reshape(count, n_dim))
    init_loss = l1_0 + percep_0
    l1_f, percep_f, lat_f = term_breakdown(final)
    # Float32 storage rounding could in principle undo a marginal final
    # improvement; fall back to the initialization when that happens.
    worse = (l1_f + percep_f + config.lam * lat_f) > init_loss
    if worse.any():
        final = final.copy()
        final[worse] = w0.reshape(count, n_dim)[worse]
        steps_taken = steps_taken.copy()
        steps_taken[worse] = 0
        l1_f, percep_f, lat_f = term_breakdown(final)

    results = []
    for i in range(count):
        results.append(
            ProjectionResult(
                image_id=image_ids[i],
                w_star=StyleLatent(final[i].reshape(spec.blocks, spec.latent_dim)),
                l1_term=float(l1_f[i]),
                perceptual_term=float(percep_f[i]),
                latent_term=float(lat_f[i]),
                steps_used=int(steps_taken[i]),
                config_digest=digest,
                w_init=StyleLatent(w0[i]),
                init_image_loss=float(init_loss[i]),
                mask=masks[i],
            )
        )
    return results


def project(
    image: np.ndarray,
    mask: np.ndarray | None,
    generator: GeneratorHandle,
    config: ProjectionConfig,
    encoder: Encoder | None = None,
    image_id: str = "0",
) -> ProjectionResult:
    masks = None if mask is None else np.asarray(mask)[None]
    return project_batch(
        np.asarray(image)[None], masks, generator, config, encoder, [image_id]
    )[0]


def write_projection_log(path: str | Path, results: Sequence[ProjectionResult]) -> None:
    """Per-image CSV: id, initial loss, final loss terms, steps taken."""
    lines = ["image_id,init_loss,final_l1,final_perceptual,final_latent,steps"]
    for r in results:
        init = "" if r.init_image_loss is None else f"{r.init_image_loss:.8f}"
        lines.append(
            f"{r.image_id},{init},{r.l1_term:.8f},{r.perceptual_term:.8f},"
            f"{r.latent_term:.8f},{r.steps_used}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
