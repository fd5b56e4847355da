"""Three-phase decoupled high-resolution adaptation.

Phase 1 trains everything with the reconstruction loss at low resolution.
Phase 2 adapts only the middle layers (encoder head + decoder input) at high
resolution. Phase 3 refines the decoder head with an adversarial loss at low
resolution while the rest of the model, and so the latent space, is frozen.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import group_norm
from .checkpoint import CheckpointManifest, save_checkpoint
from .data import DatasetHandle
from .errors import ConfigError, NumericError, PipelineError, ShapeError
from .model import DCAE, AutoencoderConfig, build, count_parameters, parameter_groups

log = logging.getLogger(__name__)

_PHASE_GROUPS = {
    1: ("all",),
    2: ("encoder_head", "decoder_input"),
    3: ("decoder_head",),
}
_PHASE_LOSSES = {1: ("reconstruction",), 2: ("reconstruction",), 3: ("reconstruction", "gan")}
_PHASE_RESOLUTION = {1: 64, 2: 256, 3: 64}


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


class Discriminator(nn.Module):
    """Four-layer fully convolutional patch discriminator producing logit maps."""

    def __init__(self, in_channels: int = 3, width: int = 32, zero_init: bool = False):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            group_norm(2 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=1, padding=1),
            group_norm(4 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 4, stride=1, padding=1),
        )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] < 16 or x.shape[-2] < 16:
            raise ShapeError(f"discriminator needs inputs of at least 16x16, got {tuple(x.shape)}")
        return self.net(x)


def build_discriminator(seed: int = 0, in_channels: int = 3, width: int = 32,
                        dtype: torch.dtype = torch.float32) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        disc = Discriminator(in_channels, width)
    return disc.to(dtype)


def gan_losses(disc: nn.Module, real: Tensor, fake: Tensor) -> tuple[Tensor, Tensor]:
    """Hinge losses ``(d_loss, g_loss)``.

    ``d_loss`` sees ``fake`` detached; gradients reach the generator only
    through ``g_loss``.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    d_loss = F.relu(1.0 - disc(real)).mean() + F.relu(1.0 + disc(fake.detach())).mean()
    g_loss = -disc(fake).mean()
    return d_loss, g_loss


@dataclass
class PhaseSpec:
    phase_id: int
    trainable_groups: tuple[str, ...] = ()
    losses: tuple[str, ...] = ()
    resolution: int = 0
    steps: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    gan_weight: float = 0.1
    disc_learning_rate: float = 1e-4
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.phase_id not in _PHASE_GROUPS:
            raise ConfigError(f"phase_id must be 1, 2 or 3, got {self.phase_id}")
        self.trainable_groups = tuple(self.trainable_groups) or _PHASE_GROUPS[self.phase_id]
        self.losses = tuple(self.losses) or _PHASE_LOSSES[self.phase_id]
        self.resolution = self.resolution or _PHASE_RESOLUTION[self.phase_id]
        self.validate()

    def validate(self) -> None:
        pid = self.phase_id
        if set(self.trainable_groups) != set(_PHASE_GROUPS[pid]):
            raise ConfigError(f"phase {pid} must train exactly {list(_PHASE_GROUPS[pid])}, got {list(self.trainable_groups)}")
        unknown = set(self.losses) - {"reconstruction", "gan"}
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}")
        if pid in (1, 2) and set(self.losses) != {"reconstruction"}:
            raise ConfigError(f"phase {pid} uses the reconstruction loss only, got {list(self.losses)}")
        if pid == 3 and "gan" not in self.losses:
            raise ConfigError("phase 3 must include the gan loss")
        if self.steps < 0 or self.batch_size < 1 or self.resolution < 1:
            raise ConfigError("steps must be >= 0, batch_size and resolution >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class PhaseReport:
    phase_id: int
    steps: int
    resolution: int
    history: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0
    trainable_params: int = 0
    total_params: int = 0
    trainable_tensors: int = 0
    optimizer_state_tensors: int = 0
    out_of_order: bool = False

    @property
    def final_loss(self) -> float:
        return self.history[-1]["reconstruction"] if self.history else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def set_trainable(model: nn.Module, names: set[str]) -> list[nn.Parameter]:
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
        if name in names:
            params.append(p)
    return params


def trainable_names(model: DCAE, groups) -> set[str]:
    table = parameter_groups(model)
    names: set[str] = set()
    for g in groups:
        if g not in table:
            raise ConfigError(f"unknown parameter group {g!r}")
        names.update(table[g])
    return names


def run_phase(
    model: DCAE,
    spec: PhaseSpec,
    data: DatasetHandle,
    disc: nn.Module | None = None,
    *,
    allow_out_of_order: bool = False,
    log_file: TextIO | None = None,
    perceptual: Callable[[Tensor, Tensor], Tensor] | None = None,
    perceptual_weight: float = 1.0,
    on_step: Callable[[int, dict], None] | None = None,
) -> PhaseReport:
    """Train ``model`` for one phase; parameters outside the phase's groups stay untouched.

    ``perceptual`` is an optional extra reconstruction term (e.g. an
    externally supplied LPIPS network) added with ``perceptual_weight``.
    ``on_step(step, record)`` runs after every optimizer step.
    """
    spec.validate()
    expected = len(model.phase_history) + 1
    out_of_order = spec.phase_id != expected
    if out_of_order and not allow_out_of_order:
        raise PipelineError(
            f"phase {spec.phase_id} requested but phase history is {model.phase_history}; "
            f"expected phase {expected} (pass allow_out_of_order for ablations)"
        )
    if data.resolution != spec.resolution:
        raise ConfigError(f"phase {spec.phase_id} expects {spec.resolution}px data, got {data.resolution}px")
    use_gan = "gan" in spec.losses
    if use_gan and disc is None:
        raise PipelineError(f"phase {spec.phase_id} uses the gan loss and needs a discriminator")

    names = trainable_names(model, spec.trainable_groups)
    params = set_trainable(model, names)
    opt = torch.optim.AdamW(params, lr=spec.learning_rate, betas=(0.9, 0.999), weight_decay=spec.weight_decay)
    d_opt = None
    if use_gan:
        d_opt = torch.optim.AdamW(disc.parameters(), lr=spec.disc_learning_rate, betas=(0.9, 0.999),
                                  weight_decay=spec.weight_decay)
    dtype = next(model.parameters()).dtype

    report = PhaseReport(
        phase_id=spec.phase_id,
        steps=spec.steps,
        resolution=spec.resolution,
        trainable_params=sum(p.numel() for p in params),
        total_params=count_parameters(model),
        trainable_tensors=len(params),
        out_of_order=out_of_order,
    )
    model.train()
    start = time.perf_counter()
    batches = data.batches(spec.batch_size)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            for step in range(spec.steps):
                t0 = time.perf_counter()
                x, _ = next(batches)
                x = x.to(dtype)
                x_hat = model(x)
                rec = reconstruction_loss(x, x_hat)
                total = rec
                record = {"phase": spec.phase_id, "step": step, "reconstruction": rec.item()}
                if perceptual is not None:
                    p_loss = perceptual(x, x_hat)
                    total = total + perceptual_weight * p_loss
                    record["perceptual"] = p_loss.item()
                if use_gan:
                    g_loss = -disc(x_hat).mean()
                    total = total + spec.gan_weight * g_loss
                    record["gan_g"] = g_loss.item()
                if not torch.isfinite(total):
                    raise NumericError(f"non-finite loss in phase {spec.phase_id} at step {step}", step=step)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                if use_gan:
                    d_loss, _ = gan_losses(disc, x, x_hat.detach())
                    if not torch.isfinite(d_loss):
                        raise NumericError(f"non-finite discriminator loss at step {step}", step=step)
                    d_opt.zero_grad(set_to_none=True)
                    d_loss.backward()
                    d_opt.step()
                    record["gan_d"] = d_loss.item()
                record["total"] = total.item()
                record["wall_ms"] = (time.perf_counter() - t0) * 1e3
                report.history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(step, record)
    finally:
        batches.close()
        for p in model.parameters():
            p.requires_grad_(True)
    report.optimizer_state_tensors = len(opt.state)
    report.wall_time_s = time.perf_counter() - start
    if not out_of_order:
        model.phase_history.append(spec.phase_id)
    log.info("phase %d: %d steps in %.1fs, final reconstruction %.4f",
             spec.phase_id, spec.steps, report.wall_time_s, report.final_loss)
    return report


@torch.no_grad()
def evaluate_reconstruction(model: DCAE, data: DatasetHandle, n: int = 16, batch_size: int = 8) -> float:
    """Mean absolute reconstruction error over the first ``n`` images."""
    model.eval()
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    n = min(n, len(data))
    for start in range(0, n, batch_size):
        x, _ = data.take(min(batch_size, n - start), start=start)
        x = x.to(dtype)
        total += reconstruction_loss(x, model(x)).item() * x.shape[0]
        count += x.shape[0]
    model.train()
    return total / count


@dataclass
class PipelineResult:
    model: DCAE
    manifest: CheckpointManifest | None
    reports: list[PhaseReport]
    discriminator: nn.Module | None = None
    checkpoints: list[Path] = field(default_factory=list)


def run_pipeline(
    config: AutoencoderConfig,
    phase_specs: list[PhaseSpec],
    data_low: DatasetHandle,
    data_high: DatasetHandle,
    seed: int = 0,
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    calibration_images: int = 64,
) -> PipelineResult:
    """Build a model and run phases 1, 2, 3 in order.

    A checkpoint is written to ``out_dir/phase{k}`` after each phase when
    ``out_dir`` is given.
    """
    ids = [s.phase_id for s in phase_specs]
    if ids != [1, 2, 3]:
        raise PipelineError(f"pipeline needs phase specs for phases [1, 2, 3] in order, got {ids}")
    p1, p2, p3 = phase_specs
    if not (p2.resolution > p1.resolution and p3.resolution < p2.resolution):
        raise PipelineError("phase 2 must run at a higher resolution than phases 1 and 3")
    model = build(config, seed=seed, dtype=dtype)
    disc = build_discriminator(seed=seed + 1, in_channels=config.in_channels, dtype=dtype)
    log_fh = None
    checkpoints: list[Path] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    reports, manifest = [], None
    try:
        for spec in phase_specs:
            data = data_high if spec.phase_id == 2 else data_low
            reports.append(run_phase(model, spec, data, disc if spec.phase_id == 3 else None, log_file=log_fh))
            if spec.phase_id == 2:
                # the latent space is final after phase 2
                calib, _ = data_low.take(calibration_images)
                model.calibrate(calib.to(dtype))
            if out_dir is not None:
                path = out_dir / f"phase{spec.phase_id}"
                manifest = save_checkpoint(model, path, seed=seed)
                checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return PipelineResult(model, manifest, reports, disc, checkpoints)
