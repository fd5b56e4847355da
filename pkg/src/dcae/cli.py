"""Command-line interface: ``dcae <command> ...``.

Outputs go to ``--out`` or ``$DCAE_OUTPUT_ROOT/<command>/<config name>``
(default root ``./runs``). Every run writes its fully resolved config as
``config.yaml`` next to its outputs.
"""

import csv
import functools
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import click
import torch

from . import ablation as abl
from .checkpoint import load_checkpoint, load_diffusion_checkpoint, save_checkpoint, save_diffusion_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import DatasetHandle, load_folder, save_image_grid, synthetic_dataset
from .diffusion import token_count
from .errors import (
    CheckpointError, ConfigError, DataError, NumericError, PipelineError, ShapeError,
)
from .generation import LatentStats, generate_images, train_latent_diffusion
from .metrics import MetricRecord, RandomConvEmbedder, embed_and_score, psnr, ssim
from .model import GROUP_NAMES, build, count_parameters, parameter_groups
from .training import build_discriminator, run_phase, run_pipeline

log = logging.getLogger("dcae")

OUTPUT_ROOT_ENV = "DCAE_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5
EXIT_CHECKPOINT = 6
EXIT_PIPELINE = 7

# order matters: CheckpointError must be checked before its IOError-like cousins
_EXIT_CODES = [
    (CheckpointError, EXIT_CHECKPOINT),
    (ConfigError, EXIT_CONFIG),
    (ShapeError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (NumericError, EXIT_NUMERIC),
    (PipelineError, EXIT_PIPELINE),
]


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except tuple(cls for cls, _ in _EXIT_CODES) as exc:
            code = next(code for cls, code in _EXIT_CODES if isinstance(exc, cls))
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(code)

    return wrapper


def _out_dir(command: str, name: str, out: str | None) -> Path:
    path = Path(out) if out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.yaml").write_text(cfg.to_yaml())


def _config_or_default(path: str | None) -> RunConfig:
    return load_config(path) if path else parse_config({})


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def _dataset(cfg: RunConfig, resolution: int, seed_offset: int = 0, count: int | None = None) -> DatasetHandle:
    d = cfg.data
    if d.folder:
        return load_folder(d.folder, resolution, seed=d.seed + seed_offset)
    spec = {"generator": d.generator, "count": count or d.count, "cell": d.cell}
    return synthetic_dataset(spec, resolution, seed=d.seed + seed_offset)


def _parse_data_spec(spec: str, resolution: int, count: int, seed: int) -> DatasetHandle:
    """``synthetic:<generator>`` or a folder path."""
    if spec.startswith("synthetic:"):
        return synthetic_dataset({"generator": spec.split(":", 1)[1], "count": count}, resolution, seed=seed)
    return load_folder(spec, resolution, seed=seed)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write((r.to_json() if hasattr(r, "to_json") else json.dumps(r)) + "\n")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Deep-compression autoencoder toolkit."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command("train-ae")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--phase", type=click.Choice(["1", "2", "3", "all"]), default="all", show_default=True)
@click.option("--checkpoint", type=click.Path(file_okay=False), help="Checkpoint to continue from (phases 2, 3).")
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def train_ae(config_path, phase, checkpoint, out):
    """Run one training phase or the full three-phase pipeline."""
    cfg = load_config(config_path)
    out = _out_dir("train-ae", cfg.name, out)
    _write_config(cfg, out)
    specs = cfg.phases.specs(cfg.seed)
    dtype = _dtype(cfg)
    if phase == "all":
        low = _dataset(cfg, specs[0].resolution)
        high = _dataset(cfg, specs[1].resolution, seed_offset=1)
        result = run_pipeline(cfg.autoencoder(), specs, low, high, seed=cfg.seed, out_dir=out, dtype=dtype)
        reports = result.reports
    else:
        spec = specs[int(phase) - 1]
        if checkpoint:
            model, _ = load_checkpoint(checkpoint, cfg.autoencoder())
        elif spec.phase_id == 1:
            model = build(cfg.autoencoder(), seed=cfg.seed, dtype=dtype)
        else:
            raise PipelineError(f"phase {spec.phase_id} needs --checkpoint from the previous phase")
        data = _dataset(cfg, spec.resolution, seed_offset=1 if spec.phase_id == 2 else 0)
        disc = None
        if spec.phase_id == 3:
            disc = build_discriminator(seed=cfg.seed + 1, in_channels=model.config.in_channels, dtype=dtype)
        with open(out / "train_log.jsonl", "w") as fh:
            reports = [run_phase(model, spec, data, disc, log_file=fh)]
        if spec.phase_id == 2:
            calib, _ = _dataset(cfg, specs[0].resolution).take(64)
            model.calibrate(calib.to(dtype))
        save_checkpoint(model, out / f"phase{spec.phase_id}", seed=cfg.seed)
    summary = []
    for r in reports:
        d = r.to_dict()
        d.pop("history")
        d["final_loss"] = r.final_loss
        summary.append(d)
        click.echo(f"phase {r.phase_id}: {r.steps} steps, final reconstruction loss {r.final_loss:.4f}, "
                   f"{r.trainable_params}/{r.total_params} trainable parameters")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    click.echo(f"outputs in {out}")


@main.command("eval-recon")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_spec", default="synthetic:mixed", show_default=True,
              help="'synthetic:<generator>' or an image folder.")
@click.option("--resolution", type=int, default=64, show_default=True)
@click.option("--n", "count", type=int, default=1024, show_default=True,
              help="Images in the evaluation set (Frechet protocol default 1024).")
@click.option("--seed", type=int, default=10_000, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--grid", "grid_images", type=int, default=8, show_default=True)
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def eval_recon(checkpoint, data_spec, resolution, count, seed, batch_size, grid_images, out):
    """PSNR / SSIM / Frechet records plus an original-vs-reconstruction grid."""
    model, manifest = load_checkpoint(checkpoint)
    data = _parse_data_spec(data_spec, resolution, count, seed)
    out = _out_dir("eval-recon", Path(checkpoint).name, out)
    dtype = next(model.parameters()).dtype
    model.eval()
    originals, recons = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x, _ = data.take(batch_size, start=start)
            originals.append(x)
            recons.append(model(x.to(dtype)).float().clamp(-1, 1))
    x, y = torch.cat(originals), torch.cat(recons)
    config_id = model.config.name
    records = [
        MetricRecord("psnr", psnr(x, y), config_id, resolution),
        MetricRecord("ssim", ssim(x, y), config_id, resolution),
        MetricRecord("mae", (x - y).abs().mean().item(), config_id, resolution),
    ]
    if len(x) >= 2:
        records.append(MetricRecord("frechet", embed_and_score(x, y, RandomConvEmbedder()), config_id, resolution))
    _write_jsonl(out / "metrics.jsonl", records)
    k = min(grid_images, len(x))
    save_image_grid([x[:k], y[:k]], out / "reconstructions.png")
    (out / "eval.json").write_text(json.dumps({
        "checkpoint": str(checkpoint), "data": data_spec, "resolution": resolution, "images": len(x),
        "seed": seed, "phase_history": manifest.phase_history,
    }, indent=2))
    for r in records:
        click.echo(f"{r.metric}: {r.value:.6g}" if math.isfinite(r.value) else f"{r.metric}: inf")


@main.group("ablate")
def ablate():
    """Shortcut and resolution ablations."""


@ablate.command("residual")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def ablate_residual(config_path, out):
    """Train shortcut / no-shortcut twins and tabulate median validation loss."""
    cfg = load_config(config_path)
    a = cfg.ablation.residual
    out = _out_dir("ablate-residual", cfg.name, out)
    _write_config(cfg, out)
    train = _dataset(cfg, a.resolution)
    val = _dataset(cfg, a.resolution, seed_offset=10_000, count=cfg.data.val_count)
    curves = []
    for seed in a.seeds:
        for variant in abl.VARIANTS:
            curve, _ = abl.train_curve(cfg.autoencoder(), variant, seed, train, val, a.steps, a.eval_every,
                                       a.batch_size, a.learning_rate, eval_images=cfg.data.val_count)
            curves.append(curve)
    _write_jsonl(out / "curves.jsonl", [vars(c) for c in curves])
    rows = abl.median_rows(curves)
    grid = rows["shortcut"][0]
    with open(out / "residual_ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", *[f"step_{s}" for s in grid]])
        for variant, (_, losses) in rows.items():
            w.writerow([variant, *[f"{v:.6f}" for v in losses]])
    click.echo("variant       " + " ".join(f"{s:>9d}" for s in grid))
    for variant, (_, losses) in rows.items():
        click.echo(f"{variant:<13} " + " ".join(f"{v:9.4f}" for v in losses))


@ablate.command("generalization")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False),
              help="Checkpoint after phase 1 only.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def ablate_generalization(checkpoint, config_path, out):
    """Loss at train and 4x resolution, with and without phase 2."""
    cfg = _config_or_default(config_path)
    g = cfg.ablation.generalization
    model, _ = load_checkpoint(checkpoint)
    if model.phase_history != [1]:
        raise PipelineError(f"expected a phase-1 checkpoint, got phase history {model.phase_history}")
    out = _out_dir("ablate-generalization", Path(checkpoint).name, out)
    _write_config(cfg, out)
    val_low = _dataset(cfg, g.train_resolution, seed_offset=10_000, count=g.eval_images)
    val_high = _dataset(cfg, g.eval_resolution, seed_offset=30_000, count=g.eval_images)
    train_high = _dataset(cfg, g.eval_resolution, seed_offset=20_000)
    result, adapted = abl.generalization(model, val_low, val_high, train_high, g.phase2_steps, g.batch_size,
                                         g.learning_rate, seed=cfg.seed, eval_images=g.eval_images)
    save_checkpoint(adapted, out / "phase2", seed=cfg.seed)
    with open(out / "generalization.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", f"res_{g.train_resolution}", f"res_{g.eval_resolution}"])
        for variant, values in result.rows().items():
            w.writerow([variant, *[f"{v:.6f}" for v in values]])
    click.echo(f"variant         {g.train_resolution:>8d} {g.eval_resolution:>8d}")
    for variant, (lo, hi) in result.rows().items():
        click.echo(f"{variant:<15} {lo:8.4f} {hi:8.4f}")


@main.command("train-diffusion")
@click.option("--ae-checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def train_diffusion(ae_checkpoint, config_path, out):
    """Train the toy diffusion transformer on normalized autoencoder latents."""
    cfg = load_config(config_path)
    d = cfg.diffusion
    ae, _ = load_checkpoint(ae_checkpoint)
    out = _out_dir("train-diffusion", cfg.name, out)
    _write_config(cfg, out)
    data = _dataset(cfg, d.resolution)
    with open(out / "diffusion_log.jsonl", "w") as fh:
        run = train_latent_diffusion(ae, data, d.build_config(), d.steps, d.batch_size, d.learning_rate,
                                     seed=cfg.seed, log_file=fh)
    extra = {**run.stats.to_dict(), "resolution": d.resolution, "data": cfg.data.model_dump()}
    save_diffusion_checkpoint(run.model, out / "diffusion", ae_checkpoint, seed=cfg.seed, extra=extra)
    last = run.losses[-1] if run.losses else float("nan")
    click.echo(f"{d.steps} steps, final loss {last:.4f}; checkpoint {out / 'diffusion'}")


@main.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False), help="Diffusion checkpoint.")
@click.option("--n", "count", type=int, default=16, show_default=True)
@click.option("--cfg", "cfg_scale", type=float, default=None, help="Guidance scale (default from checkpoint).")
@click.option("--class-label", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reference", type=int, default=0, show_default=True,
              help="Score samples against this many training images (0 = skip).")
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def sample_cmd(checkpoint, count, cfg_scale, class_label, steps, seed, reference, out):
    """Sample latents, decode them and write an image grid."""
    model, manifest = load_diffusion_checkpoint(checkpoint)
    extra = manifest.extra
    ae, _ = load_checkpoint(extra["ae_checkpoint"])
    stats = LatentStats.from_dict(extra)
    scale = model.config.cfg_scale if cfg_scale is None else cfg_scale
    if scale < 1:
        raise ConfigError("--cfg must be >= 1")
    out = _out_dir("sample", Path(checkpoint).parent.name, out)
    images = generate_images(ae, model, stats, count, class_label=class_label, cfg_scale=scale, steps=steps, seed=seed)
    per_row = min(8, count)
    padded = torch.cat([images, -torch.ones(-count % per_row, *images.shape[1:], dtype=images.dtype)])
    save_image_grid(list(padded.split(per_row)), out / "samples.png")
    torch.save(images, out / "samples.pt")
    info = {"checkpoint": str(checkpoint), "n": count, "cfg": scale, "class_label": class_label, "seed": seed}
    if reference:
        d = extra["data"]
        ref_cfg = parse_config({"data": d})
        ref, _ = _dataset(ref_cfg, extra["resolution"], count=reference).take(reference)
        score = embed_and_score(ref, images, RandomConvEmbedder())
        _write_jsonl(out / "metrics.jsonl",
                     [MetricRecord("frechet", score, f"{ae.config.name}-p{model.config.patch_size}", extra["resolution"])])
        info["frechet"] = score
        click.echo(f"frechet: {score:.6g}")
    (out / "sample.json").write_text(json.dumps(info, indent=2))
    click.echo(f"{count} samples written to {out / 'samples.png'}")


@main.command("profile")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@_handle_errors
def profile(config_path, out):
    """Parameter counts, per-phase trainable counts, step timing and token counts."""
    cfg = load_config(config_path)
    p = cfg.profile
    ae_cfg = cfg.autoencoder()
    out = _out_dir("profile", cfg.name, out)
    _write_config(cfg, out)
    model = build(ae_cfg, seed=cfg.seed, dtype=_dtype(cfg))
    groups = parameter_groups(model)
    report = {
        "config": ae_cfg.name,
        "parameters": {g: count_parameters(model, groups[g]) for g in GROUP_NAMES},
        "trainable_per_phase": {
            f"phase{s.phase_id}": sum(count_parameters(model, groups[g]) for g in s.trainable_groups)
            for s in cfg.phases.specs(cfg.seed)
        },
        "latent_shape": list(ae_cfg.latent_shape(p.resolution)),
    }
    tokens = {}
    for f in sorted({8, 16, 32, 64, 128, ae_cfg.f}):
        for patch in p.patch_sizes:
            if p.resolution % (f * patch) == 0:
                tokens.setdefault(f"f{f}", {})[f"p{patch}"] = token_count(p.resolution, f, patch)
    report["tokens"] = {"resolution": p.resolution, "model": tokens.get(f"f{ae_cfg.f}", {}), "grid": tokens}

    res = p.timing_resolution or cfg.phases.specs(cfg.seed)[0].resolution
    x = torch.rand(p.batch_size, ae_cfg.in_channels, res, res, dtype=_dtype(cfg)) * 2 - 1
    fwd, bwd = [], []
    for _ in range(p.repeats):
        t0 = time.perf_counter()
        loss = (model(x) - x).abs().mean()
        t1 = time.perf_counter()
        loss.backward()
        t2 = time.perf_counter()
        model.zero_grad(set_to_none=True)
        fwd.append((t1 - t0) * 1e3)
        bwd.append((t2 - t1) * 1e3)
    report["timing"] = {"resolution": res, "batch_size": p.batch_size,
                        "forward_ms": min(fwd), "backward_ms": min(bwd)}
    (out / "profile.json").write_text(json.dumps(report, indent=2))
    click.echo(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
