"""Generator contracts and the two desk-scale implementations.

``GeneratorHandle`` is the interface the rest of the toolkit programs
against: map noise to a style latent, synthesize images from a latent
stack, and expose a weight fingerprint for cache validity.  Two concrete
generators implement it:

* ``LinearOracleGenerator`` -- an affine map from the flattened latent to
  pixels.  Its least-squares projections have closed-form solutions, which
  makes it the reference oracle for the latent optimizer.  Output clamping
  is off by default so the closed form stays exact.
* ``ToyStyleGenerator`` -- a small trainable style-modulated convolutional
  generator.  A 3-layer fully connected mapping network turns z into a
  style row; synthesis starts from a learned constant 4x4 tensor and runs
  two styled conv blocks per resolution, each applying per-channel
  normalization then a style-driven scale and shift.  The output passes
  through a logistic squash, so pixels always land in [0, 1].  There is no
  per-pixel noise injection: synthesis is a pure function of the latent.

``train_toy_generator`` runs a standard adversarial loop (non-saturating
loss, R1 gradient penalty on real images) against an image dataset and
aborts with the last healthy checkpoint if the losses go non-finite.
"""

from __future__ import annotations

import hashlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import read_container, write_container
from .latent import BlockPartition, StyleLatent, default_partition
from .seeds import derive_rng

__all__ = [
    "GeneratorSpec",
    "GeneratorHandle",
    "LinearOracleGenerator",
    "ToyGeneratorConfig",
    "ToyStyleGenerator",
    "GeneratorTrainingError",
    "sample_z",
    "mean_w",
    "train_toy_generator",
]


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape contract of a generator: B blocks, D-dim styles, output size."""

    blocks: int
    latent_dim: int
    resolution: int
    channels: int
    partition: BlockPartition

    def __post_init__(self) -> None:
        if self.blocks < 3:
            raise ValueError(f"need at least 3 blocks, got {self.blocks}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.resolution < 4 or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {self.resolution}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.partition.blocks != self.blocks:
            raise ValueError(
                f"partition covers {self.partition.blocks} blocks, spec has {self.blocks}"
            )

    @property
    def pixels(self) -> int:
        return self.channels * self.resolution * self.resolution


def sample_z(seed: int, count: int, dim: int) -> np.ndarray:
    """Standard normal noise batch (count, dim), deterministic per seed."""
    if count < 0 or dim < 1:
        raise ValueError(f"invalid sample shape ({count}, {dim})")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, dim)).astype(np.float32)


class GeneratorHandle(ABC):
    """Mapping + synthesis pair the projection and view pipelines consume."""

    spec: GeneratorSpec

    @abstractmethod
    def map_rows(self, z: np.ndarray) -> np.ndarray:
        """Map a (K, D) noise batch to (K, D) style rows."""

    @abstractmethod
    def synthesize_t(self, w: torch.Tensor) -> torch.Tensor:
        """Differentiable synthesis of a (K, B, D) latent batch to images."""

    @abstractmethod
    def torch_dtype(self) -> torch.dtype:
        ...

    @abstractmethod
    def fingerprint(self) -> str:
        """Hex digest of the weights; changes whenever synthesis would."""

    def map_to_w(self, z: np.ndarray) -> StyleLatent:
        """Map a single noise vector to a latent stack (row tiled to all B)."""
        z = np.asarray(z, dtype=np.float32).reshape(1, -1)
        if z.shape[1] != self.spec.latent_dim:
            raise ValueError(f"z has dim {z.shape[1]}, expected {self.spec.latent_dim}")
        row = self.map_rows(z)[0]
        return StyleLatent(np.tile(row, (self.spec.blocks, 1)))

    def sample_z(self, seed: int, count: int) -> np.ndarray:
        return sample_z(seed, count, self.spec.latent_dim)

    def _latent_batch(self, ws: Sequence[StyleLatent] | np.ndarray) -> torch.Tensor:
        if isinstance(ws, np.ndarray):
            arr = np.asarray(ws, dtype=np.float32)
            if arr.ndim != 3:
                raise ValueError(f"latent batch must be (K, B, D), got {arr.shape}")
        else:
            arr = np.stack([w.values for w in ws])
        if arr.shape[1:] != (self.spec.blocks, self.spec.latent_dim):
            raise ValueError(
                f"latent batch shape {arr.shape[1:]} does not match spec "
                f"({self.spec.blocks}, {self.spec.latent_dim})"
            )
        return torch.from_numpy(arr).to(self.torch_dtype())

    def synthesize_batch(self, ws: Sequence[StyleLatent] | np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self.synthesize_t(self._latent_batch(ws))
        return out.to(torch.float32).numpy()

    def synthesize(self, w: StyleLatent) -> np.ndarray:
        return self.synthesize_batch([w])[0]


def mean_w(generator: GeneratorHandle, num_samples: int, seed: int) -> StyleLatent:
    """Average mapped style row over ``num_samples`` noise draws, tiled to B."""
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    z = generator.sample_z(seed, num_samples)
    rows = generator.map_rows(z).astype(np.float64)
    center = rows.mean(axis=0).astype(np.float32)
    return StyleLatent(np.tile(center, (generator.spec.blocks, 1)))


class LinearOracleGenerator(GeneratorHandle):
    """Affine latent-to-pixel map with closed-form least-squares inversions.

    ``weight`` is (P, B*D) with full column rank and ``bias`` is (P,), where
    P equals channels * resolution^2.  The mapping network is the identity.
    Intended as a test oracle; ``clamp_output`` is off by default so that
    projections match the normal-equations solution exactly.
    """

    def __init__(
        self,
        weight: np.ndarray,
        bias: np.ndarray,
        spec: GeneratorSpec,
        clamp_output: bool = False,
    ) -> None:
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        n_latent = spec.blocks * spec.latent_dim
        if weight.shape != (spec.pixels, n_latent):
            raise ValueError(
                f"weight shape {weight.shape} != ({spec.pixels}, {n_latent})"
            )
        if bias.shape != (spec.pixels,):
            raise ValueError(f"bias shape {bias.shape} != ({spec.pixels},)")
        if np.linalg.matrix_rank(weight) < n_latent:
            raise ValueError("weight must have full column rank")
        self.spec = spec
        self.clamp_output = clamp_output
        self._weight = torch.from_numpy(weight.copy())
        self._bias = torch.from_numpy(bias.copy())

    @classmethod
    def random(
        cls,
        spec: GeneratorSpec,
        seed: int,
        scale: float = 0.1,
        clamp_output: bool = False,
    ) -> "LinearOracleGenerator":
        rng = np.random.default_rng(seed)
        n_latent = spec.blocks * spec.latent_dim
        weight = rng.standard_normal((spec.pixels, n_latent)) * scale
        bias = np.full(spec.pixels, 0.5)
        return cls(weight, bias, spec, clamp_output=clamp_output)

    def map_rows(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ValueError(f"z batch must be (K, {self.spec.latent_dim})")
        return z.copy()

    def synthesize_t(self, w: torch.Tensor) -> torch.Tensor:
        k = w.shape[0]
        flat = w.reshape(k, -1).to(torch.float64)
        out = flat @ self._weight.T + self._bias
        if self.clamp_output:
            out = out.clamp(0.0, 1.0)
        s = self.spec
        return out.reshape(k, s.channels, s.resolution, s.resolution)

    def torch_dtype(self) -> torch.dtype:
        return torch.float64

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self._weight.numpy().tobytes())
        h.update(self._bias.numpy().tobytes())
        h.update(b"clamp" if self.clamp_output else b"linear")
        return h.hexdigest()

    def weight_matrix(self) -> np.ndarray:
        return self._weight.numpy().copy()

    def bias_vector(self) -> np.ndarray:
        return self._bias.numpy().copy()


@dataclass(frozen=True)
class ToyGeneratorConfig:
    """Architecture and adversarial-training settings for the toy generator."""

    resolution: int = 32
    channels: int = 3
    latent_dim: int = 64
    channel_base: int = 128
    channel_min: int = 16
    mapping_depth: int = 3
    seed: int = 0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    disc_lr: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    r1_gamma: float = 1.0
    r1_interval: int = 8
    snapshot_interval: int = 50
    log_interval: int = 25

    def spec(self) -> GeneratorSpec:
        blocks = 2 * (int(math.log2(self.resolution)) - 1)
        return GeneratorSpec(
            blocks=blocks,
            latent_dim=self.latent_dim,
            resolution=self.resolution,
            channels=self.channels,
            partition=default_partition(blocks),
        )

    def digest(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(vars(self).items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _stage_channels(config: ToyGeneratorConfig) -> list[int]:
    stages = int(math.log2(config.resolution)) - 1
    return [max(config.channel_min, config.channel_base >> i) for i in range(stages)]


class _Mapping(nn.Module):
    def __init__(self, dim: int, depth: int) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(depth):
            layers += [nn.Linear(dim, dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class _StyledBlock(nn.Module):
    """3x3 conv, per-channel normalization, style-driven scale and shift."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool) -> None:
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = nn.Linear(style_dim, 2 * out_ch)
        # Zero-init the style affine so training starts from the unmodulated
        # path; the +1 below keeps the initial scale at identity.
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)

    def forward(self, h: torch.Tensor, w_row: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv(h)
        h = F.instance_norm(h)
        scale, shift = self.affine(w_row).chunk(2, dim=1)
        h = (1 + scale)[:, :, None, None] * h + shift[:, :, None, None]
        return F.leaky_relu(h, 0.2)


class _Synthesis(nn.Module):
    def __init__(self, config: ToyGeneratorConfig) -> None:
        super().__init__()
        chans = _stage_channels(config)
        self.const = nn.Parameter(torch.randn(1, chans[0], 4, 4))
        blocks: list[_StyledBlock] = []
        prev = chans[0]
        for stage, ch in enumerate(chans):
            blocks.append(_StyledBlock(prev, ch, config.latent_dim, upsample=stage > 0))
            blocks.append(_StyledBlock(ch, ch, config.latent_dim, upsample=False))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(prev, config.channels, 1)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        h = self.const.expand(w.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            h = block(h, w[:, i])
        return torch.sigmoid(self.to_rgb(h))


class _Discriminator(nn.Module):
    def __init__(self, config: ToyGeneratorConfig) -> None:
        super().__init__()
        chans = _stage_channels(config)[::-1]
        layers: list[nn.Module] = [nn.Conv2d(config.channels, chans[0], 3, padding=1)]
        prev = chans[0]
        for ch in chans:
            layers += [nn.LeakyReLU(0.2), nn.Conv2d(prev, ch, 3, stride=2, padding=1)]
            prev = ch
        self.features = nn.Sequential(*layers)
        tail = config.resolution >> len(chans)  # spatial extent after the stride-2 stack
        self.head = nn.Linear(prev * tail * tail, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.flatten(1)).squeeze(1)


class ToyStyleGenerator(GeneratorHandle):
    """Trainable style-modulated convolutional generator."""

    def __init__(self, config: ToyGeneratorConfig) -> None:
        self.config = config
        self.spec = config.spec()
        torch.manual_seed(config.seed)
        self.mapping = _Mapping(config.latent_dim, config.mapping_depth)
        self.synthesis = _Synthesis(config)
        self.mapping.eval()
        self.synthesis.eval()

    def map_rows(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ValueError(f"z batch must be (K, {self.spec.latent_dim})")
        with torch.no_grad():
            return self.mapping(torch.from_numpy(z)).numpy()

    def map_rows_t(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def synthesize_t(self, w: torch.Tensor) -> torch.Tensor:
        expected = (self.spec.blocks, self.spec.latent_dim)
        if tuple(w.shape[1:]) != expected:
            raise ValueError(f"latent batch shape {tuple(w.shape[1:])} != {expected}")
        return self.synthesis(w.to(torch.float32))

    def torch_dtype(self) -> torch.dtype:
        return torch.float32

    def _state(self) -> dict[str, torch.Tensor]:
        state = {f"mapping.{k}": v for k, v in self.mapping.state_dict().items()}
        state.update({f"synthesis.{k}": v for k, v in self.synthesis.state_dict().items()})
        return state

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self._state().items()):
            h.update(name.encode("utf-8"))
            h.update(tensor.detach().to(torch.float32).numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        arrays = {k: v.detach().numpy() for k, v in self._state().items()}
        meta = {
            "config": {k: v for k, v in vars(self.config).items()},
            "digest": self.config.digest(),
        }
        meta.update(extra_meta or {})
        write_container(path, "generator", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ToyStyleGenerator":
        meta, arrays = read_container(path, expect_kind="generator")
        config = ToyGeneratorConfig(**meta["config"])
        gen = cls(config)
        mapping_state = {}
        synthesis_state = {}
        for name, arr in arrays.items():
            scope, key = name.split(".", 1)
            tensor = torch.from_numpy(arr)
            if scope == "mapping":
                mapping_state[key] = tensor
            else:
                synthesis_state[key] = tensor
        gen.mapping.load_state_dict(mapping_state)
        gen.synthesis.load_state_dict(synthesis_state)
        return gen


class GeneratorTrainingError(RuntimeError):
    """Adversarial training diverged; carries the last healthy generator."""

    def __init__(self, message: str, generator: ToyStyleGenerator) -> None:
        super().__init__(message)
        self.generator = generator


def _load_snapshot(generator: ToyStyleGenerator, snapshot: dict[str, torch.Tensor]) -> None:
    mapping_state = {k.split(".", 1)[1]: v for k, v in snapshot.items() if k.startswith("mapping.")}
    synth_state = {k.split(".", 1)[1]: v for k, v in snapshot.items() if k.startswith("synthesis.")}
    generator.mapping.load_state_dict(mapping_state)
    generator.synthesis.load_state_dict(synth_state)


def train_toy_generator(
    images: np.ndarray, config: ToyGeneratorConfig
) -> tuple[ToyStyleGenerator, list[dict]]:
    """Adversarially train a toy generator against an image array.

    ``images`` is (N, C, H, W) in [0, 1].  Returns the trained generator and
    a list of metric rows (step, discriminator loss, generator loss, R1
    penalty).  Zero steps returns the freshly initialized generator.  If any
    loss turns non-finite the run aborts with ``GeneratorTrainingError``
    carrying the most recent snapshot.
    """
    images = np.asarray(images, dtype=np.float32)
    spec_shape = (config.channels, config.resolution, config.resolution)
    if images.ndim != 4 or images.shape[1:] != spec_shape:
        raise ValueError(f"images must be (N, {spec_shape}), got {images.shape}")
    if images.shape[0] < config.batch_size:
        raise ValueError("need at least one full batch of images")

    generator = ToyStyleGenerator(config)
    disc = _Discriminator(config)
    if config.steps == 0:
        return generator, []

    generator.mapping.train()
    generator.synthesis.train()
    gen_params = list(generator.mapping.parameters()) + list(generator.synthesis.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.disc_lr, betas=(config.beta1, config.beta2))
    rng = derive_rng(config.seed, "gan-batches")
    snapshot = {k: v.clone() for k, v in generator._state().items()}
    metrics: list[dict] = []

    for step in range(config.steps):
        idx = rng.integers(0, images.shape[0], size=config.batch_size)
        real = torch.from_numpy(images[idx])
        z = torch.from_numpy(
            rng.standard_normal((config.batch_size, config.latent_dim)).astype(np.float32)
        )
        rows = generator.mapping(z)
        w = rows[:, None, :].expand(-1, generator.spec.blocks, -1)
        fake = generator.synthesis(w)

        r1 = torch.zeros(())
        if step % config.r1_interval == 0:
            real_rq = real.detach().requires_grad_(True)
            d_real = disc(real_rq)
            (grad,) = torch.autograd.grad(d_real.sum(), real_rq, create_graph=True)
            r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
            d_loss = (
                F.softplus(-d_real).mean()
                + F.softplus(disc(fake.detach())).mean()
                + 0.5 * config.r1_gamma * r1
            )
        else:
            d_loss = F.softplus(-disc(real)).mean() + F.softplus(disc(fake.detach())).mean()
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        g_loss = F.softplus(-disc(fake)).mean()
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
            _load_snapshot(generator, snapshot)
            generator.mapping.eval()
            generator.synthesis.eval()
            raise GeneratorTrainingError(
                f"training diverged at step {step}", generator
            )
        if step % config.snapshot_interval == 0:
            snapshot = {k: v.clone() for k, v in generator._state().items()}
        if step % config.log_interval == 0 or step == config.steps - 1:
            metrics.append(
                {
                    "step": step,
                    "d_loss": float(d_loss.detach()),
                    "g_loss": float(g_loss.detach()),
                    "r1": float(r1.detach()),
                }
            )

    generator.mapping.eval()
    generator.synthesis.eval()
    return generator, metrics
