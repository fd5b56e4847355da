"""Latent diffusion on top of a trained autoencoder: encode, train, sample, decode."""

import json
import logging
from dataclasses import dataclass, field
from typing import TextIO

import torch
from torch import Tensor

from .data import DatasetHandle
from .diffusion import DiffusionConfig, DiffusionTrainer, ToyDiT, build_dit, sample
from .errors import ConfigError
from .metrics import RandomConvEmbedder, embed_and_score
from .model import DCAE

log = logging.getLogger(__name__)


@torch.no_grad()
def encode_dataset(ae: DCAE, data: DatasetHandle, batch_size: int = 32) -> tuple[Tensor, Tensor]:
    """Raw latents and labels of every image in ``data``."""
    ae.eval()
    dtype = next(ae.parameters()).dtype
    zs, ys = [], []
    for start in range(0, len(data), batch_size):
        x, y = data.take(batch_size, start=start)
        zs.append(ae.encode(x.to(dtype)))
        ys.append(y)
    return torch.cat(zs), torch.cat(ys)


@dataclass
class LatentStats:
    shift: Tensor
    scale: Tensor

    @classmethod
    def from_latents(cls, z: Tensor) -> "LatentStats":
        z = z.double()
        return cls(z.mean(dim=(0, 2, 3)), z.std(dim=(0, 2, 3)).clamp_min(1e-6))

    def normalize(self, z: Tensor) -> Tensor:
        return ((z.double() - self.shift.view(1, -1, 1, 1)) / self.scale.view(1, -1, 1, 1)).to(z.dtype)

    def denormalize(self, z: Tensor) -> Tensor:
        return (z.double() * self.scale.view(1, -1, 1, 1) + self.shift.view(1, -1, 1, 1)).to(z.dtype)

    def to_dict(self) -> dict:
        return {"latent_shift": self.shift.tolist(), "latent_scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(torch.tensor(d["latent_shift"], dtype=torch.float64),
                   torch.tensor(d["latent_scale"], dtype=torch.float64))


def latent_stats(ae: DCAE, latents: Tensor) -> LatentStats:
    """The checkpoint's calibration if it has one, else statistics of ``latents``."""
    if ae.phase_history and ae.phase_history[-1] >= 2:
        return LatentStats(torch.as_tensor(ae.latent_shift, dtype=torch.float64),
                           torch.as_tensor(ae.latent_scale, dtype=torch.float64))
    log.warning("autoencoder has no calibrated latent statistics; estimating them from the training latents")
    return LatentStats.from_latents(latents)


@dataclass
class DiffusionRun:
    model: ToyDiT
    stats: LatentStats
    losses: list[float] = field(default_factory=list)


def train_latent_diffusion(ae: DCAE, data: DatasetHandle, config: DiffusionConfig, steps: int,
                           batch_size: int = 32, learning_rate: float = 1e-4, seed: int = 0,
                           log_file: TextIO | None = None, model: ToyDiT | None = None) -> DiffusionRun:
    if config.num_classes and config.num_classes < data.num_classes:
        raise ConfigError(f"diffusion num_classes={config.num_classes} but the dataset has {data.num_classes} classes")
    z, labels = encode_dataset(ae, data)
    stats = latent_stats(ae, z)
    z = stats.normalize(z).float()
    c, size = z.shape[1], z.shape[2]
    if model is None:
        model = build_dit(config, c, size, seed=seed)
    trainer = DiffusionTrainer(model, lr=learning_rate)
    g = torch.Generator().manual_seed(seed)
    run = DiffusionRun(model, stats)
    for step in range(steps):
        idx = torch.randint(0, z.shape[0], (batch_size,), generator=g)
        y = labels[idx] if config.num_classes else None
        loss = trainer.train_step(z[idx], y, g)
        run.losses.append(loss)
        if log_file is not None:
            log_file.write(json.dumps({"step": step, "loss": loss}) + "\n")
    return run


@torch.no_grad()
def generate_images(ae: DCAE, model: ToyDiT, stats: LatentStats, n: int, class_label=None,
                    cfg_scale: float = 1.0, steps: int | None = None, seed: int = 0) -> Tensor:
    z = sample(model, n, class_label=class_label, cfg_scale=cfg_scale, steps=steps, seed=seed)
    dtype = next(ae.parameters()).dtype
    ae.eval()
    return ae.decode(stats.denormalize(z).to(dtype)).clamp(-1, 1)


def sample_score(ae: DCAE, model: ToyDiT, stats: LatentStats, reference: Tensor, n: int,
                 seed: int = 0, embedder=None, **sample_kwargs) -> float:
    """Frechet distance between decoded samples and ``reference`` images."""
    fake = generate_images(ae, model, stats, n, seed=seed, **sample_kwargs)
    return embed_and_score(reference, fake, embedder or RandomConvEmbedder())
