"""Shortcut and resolution-generalization ablations."""

import copy
import logging
import statistics
from dataclasses import dataclass, field, replace

from .data import DatasetHandle
from .model import DCAE, AutoencoderConfig, build
from .training import PhaseSpec, evaluate_reconstruction, run_phase

log = logging.getLogger(__name__)

VARIANTS = ("shortcut", "no_shortcut")


@dataclass
class Curve:
    variant: str
    seed: int
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def final(self) -> float:
        return self.losses[-1]


def twin_configs(config: AutoencoderConfig) -> dict[str, AutoencoderConfig]:
    return {"shortcut": replace(config, residual=True), "no_shortcut": replace(config, residual=False)}


def train_curve(config: AutoencoderConfig, variant: str, seed: int, train: DatasetHandle, val: DatasetHandle,
                steps: int, eval_every: int, batch_size: int = 4, learning_rate: float = 1e-4,
                eval_images: int = 64) -> tuple[Curve, DCAE]:
    """Phase-1 training of one twin with validation loss sampled on a fixed step grid."""
    model = build(twin_configs(config)[variant], seed=seed)
    curve = Curve(variant, seed, [0], [evaluate_reconstruction(model, val, n=eval_images)])

    def probe(step, _record):
        done = step + 1
        if done % eval_every == 0 or done == steps:
            curve.steps.append(done)
            curve.losses.append(evaluate_reconstruction(model, val, n=eval_images))

    spec = PhaseSpec(1, steps=steps, batch_size=batch_size, learning_rate=learning_rate,
                     resolution=train.resolution, seed=seed)
    report = run_phase(model, spec, train, on_step=probe)
    curve.wall_time_s = report.wall_time_s
    log.info("%s seed %d: val loss %.4f -> %.4f", variant, seed, curve.losses[0], curve.final)
    return curve, model


def median_rows(curves: list[Curve]) -> dict[str, tuple[list[int], list[float]]]:
    """Per-variant median validation loss at each grid step, across seeds."""
    rows = {}
    for variant in VARIANTS:
        mine = [c for c in curves if c.variant == variant]
        if not mine:
            continue
        grid = mine[0].steps
        if any(c.steps != grid for c in mine):
            raise ValueError(f"{variant} curves were sampled on different step grids")
        rows[variant] = (grid, [statistics.median(c.losses[i] for c in mine) for i in range(len(grid))])
    return rows


@dataclass
class GeneralizationResult:
    train_resolution: int
    eval_resolution: int
    low_before: float
    high_before: float
    low_after: float
    high_after: float
    phase2_time_s: float = 0.0

    @property
    def degrades_without_phase2(self) -> bool:
        return self.high_before > self.low_before

    @property
    def phase2_improves(self) -> bool:
        return self.high_after < self.high_before

    def rows(self) -> dict[str, list[float]]:
        return {
            "without_phase2": [self.low_before, self.high_before],
            "with_phase2": [self.low_after, self.high_after],
        }


def generalization(model: DCAE, val_low: DatasetHandle, val_high: DatasetHandle, train_high: DatasetHandle,
                   phase2_steps: int = 500, batch_size: int = 2, learning_rate: float = 1e-4,
                   seed: int = 0, eval_images: int = 16) -> tuple[GeneralizationResult, DCAE]:
    """Evaluate a low-resolution model at both resolutions, before and after a phase-2 run.

    ``model`` is left untouched; phase 2 runs on a copy, which is returned.
    """
    low_before = evaluate_reconstruction(model, val_low, n=eval_images)
    high_before = evaluate_reconstruction(model, val_high, n=eval_images)
    adapted = copy.deepcopy(model)
    spec = PhaseSpec(2, steps=phase2_steps, batch_size=batch_size, learning_rate=learning_rate,
                     resolution=train_high.resolution, seed=seed)
    report = run_phase(adapted, spec, train_high)
    result = GeneralizationResult(
        val_low.resolution, val_high.resolution, low_before, high_before,
        evaluate_reconstruction(adapted, val_low, n=eval_images),
        evaluate_reconstruction(adapted, val_high, n=eval_images),
        report.wall_time_s,
    )
    return result, adapted
