"""Run configuration: one YAML file with a closed, validated schema.

Section keys mirror the fields of the library types they build
(``AutoencoderConfig``, ``PhaseSpec``, ``DiffusionConfig``).
"""

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .model import AutoencoderConfig, preset
from .training import PhaseSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    preset: Literal["f32c32", "f64c128", "f128c512"] | None = "f32c32"
    base_width: int = Field(64, ge=1)
    f: int | None = None
    latent_channels: int | None = None
    stage_widths: list[int] | None = None
    blocks_per_stage: list[int] | None = None
    in_channels: int | None = None
    residual: bool | None = None
    attention: bool | None = None
    middle_stages: int | None = None
    decoder_head_stages: int | None = None

    def build_config(self) -> AutoencoderConfig:
        overrides = self.model_dump(exclude={"preset", "base_width"}, exclude_none=True)
        if self.preset is None:
            return AutoencoderConfig(**overrides)
        return preset(self.preset, base_width=self.base_width, **overrides)


class DataSection(_Section):
    generator: Literal["gradients", "checkerboards", "gaussian-blobs", "mixed"] = "mixed"
    count: int = Field(1024, ge=1)
    cell: int | None = Field(None, ge=1)
    folder: str | None = None
    val_count: int = Field(64, ge=1)
    seed: int = 0


class PhaseSection(_Section):
    steps: int = Field(100, ge=0)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    resolution: int | None = Field(None, ge=1)
    gan_weight: float = Field(0.1, ge=0)
    disc_learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)

    def spec(self, phase_id: int, seed: int) -> PhaseSpec:
        fields = self.model_dump(exclude_none=True)
        return PhaseSpec(phase_id, seed=seed, **fields)


class PhasesSection(_Section):
    phase1: PhaseSection = PhaseSection()
    phase2: PhaseSection = PhaseSection()
    phase3: PhaseSection = PhaseSection()

    def specs(self, seed: int) -> list[PhaseSpec]:
        return [self.phase1.spec(1, seed), self.phase2.spec(2, seed), self.phase3.spec(3, seed)]


class DiffusionSection(_Section):
    patch_size: int = Field(1, ge=1)
    width: int = Field(256, ge=1)
    depth: int = Field(6, ge=1)
    heads: int = Field(4, ge=1)
    timesteps: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_classes: int = Field(0, ge=0)
    cfg_scale: float = Field(1.5, ge=1)
    sample_steps: int = Field(50, ge=1)
    class_dropout: float = Field(0.1, ge=0, le=1)
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    resolution: int = Field(64, ge=1)

    def build_config(self) -> DiffusionConfig:
        return DiffusionConfig(**self.model_dump(exclude={"steps", "batch_size", "learning_rate", "resolution"}))


class ResidualAblation(_Section):
    steps: int = Field(2000, ge=1)
    eval_every: int = Field(500, ge=1)
    seeds: list[int] = [0, 1, 2]
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    resolution: int = Field(64, ge=1)


class GeneralizationAblation(_Section):
    train_resolution: int = Field(64, ge=1)
    eval_resolution: int = Field(256, ge=1)
    phase2_steps: int = Field(500, ge=0)
    batch_size: int = Field(2, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    eval_images: int = Field(16, ge=1)


class AblationSection(_Section):
    residual: ResidualAblation = ResidualAblation()
    generalization: GeneralizationAblation = GeneralizationAblation()


class ProfileSection(_Section):
    resolution: int = Field(512, ge=1)
    timing_resolution: int | None = Field(None, ge=1)
    batch_size: int = Field(1, ge=1)
    repeats: int = Field(1, ge=1)
    patch_sizes: list[int] = [1, 2, 4, 8]


class RunConfig(_Section):
    name: str = "run"
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    phases: PhasesSection = PhasesSection()
    diffusion: DiffusionSection = DiffusionSection()
    ablation: AblationSection = AblationSection()
    profile: ProfileSection = ProfileSection()

    def autoencoder(self) -> AutoencoderConfig:
        return self.model.build_config()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict | None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None
    # library-level checks (stage divisibility etc.) run eagerly so errors surface before any work
    for section, check in (("model", cfg.autoencoder), ("phases", lambda: cfg.phases.specs(cfg.seed)),
                           ("diffusion", cfg.diffusion.build_config)):
        try:
            check()
        except ConfigError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return parse_config(data)
