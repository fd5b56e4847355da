"""Deterministic deep-compression autoencoder assembled from residual blocks."""

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .blocks import (
    AttnBlock,
    LatentProjectIn,
    LatentProjectOut,
    ResBlock,
    ResidualDownsampleBlock,
    ResidualUpsampleBlock,
    group_norm,
)
from .errors import ConfigError, ShapeError

GROUP_NAMES = ("all", "encoder_head", "decoder_input", "decoder_head", "other")

# stage width multipliers relative to the base width
_PRESETS = {
    "f32c32": ((1, 2, 4, 4, 4, 8), 32),
    "f64c128": ((1, 2, 4, 4, 4, 8, 8), 128),
    "f128c512": ((1, 2, 4, 4, 4, 8, 8, 8), 512),
}


@dataclass
class AutoencoderConfig:
    f: int = 32
    latent_channels: int = 32
    stage_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 256, 256, 512])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1, 1, 1])
    in_channels: int = 3
    residual: bool = True
    attention: bool = False
    middle_stages: int = 1
    decoder_head_stages: int = 1

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def name(self) -> str:
        return f"f{self.f}c{self.latent_channels}"

    def latent_shape(self, height: int, width: int | None = None) -> tuple[int, int, int]:
        width = height if width is None else width
        if height % self.f or width % self.f:
            raise ShapeError(f"image size {height}x{width} is not divisible by f={self.f}")
        return self.latent_channels, height // self.f, width // self.f

    def validate(self) -> None:
        problems = []
        s = len(self.stage_widths)
        if s < 1:
            problems.append("stage_widths must be non-empty")
        if self.f < 1 or self.f & (self.f - 1):
            problems.append(f"f={self.f} must be a power of two")
        elif s >= 1 and self.f != 2 ** (s - 1):
            problems.append(f"f={self.f} must equal 2**(len(stage_widths) - 1) = {2 ** (s - 1)}")
        if len(self.blocks_per_stage) != s:
            problems.append(
                f"blocks_per_stage has {len(self.blocks_per_stage)} entries, expected {s}"
            )
        if any(b < 0 for b in self.blocks_per_stage):
            problems.append("blocks_per_stage entries must be non-negative")
        if any(w < 1 for w in self.stage_widths):
            problems.append("stage_widths entries must be positive")
        if self.in_channels < 1 or self.latent_channels < 1:
            problems.append("in_channels and latent_channels must be positive")
        for a, b in zip(self.stage_widths, self.stage_widths[1:]):
            if (4 * a) % b:
                problems.append(f"downsample {a}->{b}: {b} must divide 4*{a}")
            if b % 4 or a % (b // 4):
                problems.append(f"upsample {b}->{a}: {b} must be divisible by 4 and {b}/4 must divide {a}")
        if s >= 1 and self.stage_widths[-1] % self.latent_channels:
            problems.append(
                f"latent_channels={self.latent_channels} must divide final stage width {self.stage_widths[-1]}"
            )
        if self.middle_stages < 1 or self.decoder_head_stages < 1:
            problems.append("middle_stages and decoder_head_stages must be >= 1")
        if self.middle_stages + self.decoder_head_stages > s:
            problems.append(
                f"middle_stages + decoder_head_stages = {self.middle_stages + self.decoder_head_stages} "
                f"exceeds the {s} decoder stages, groups would overlap"
            )
        if problems:
            raise ConfigError("invalid autoencoder config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AutoencoderConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown autoencoder config keys: {sorted(unknown)}")
        return cls(**data)


def preset(name: str, base_width: int = 64, **overrides) -> AutoencoderConfig:
    """Named configs ``f32c32``, ``f64c128`` and ``f128c512`` at a chosen base width."""
    try:
        mults, c = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}") from None
    kwargs = dict(
        f=2 ** (len(mults) - 1),
        latent_channels=c,
        stage_widths=[m * base_width for m in mults],
        blocks_per_stage=[1] * len(mults),
    )
    kwargs.update(overrides)
    return AutoencoderConfig(**kwargs)


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.stage_widths
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.stages = nn.ModuleList()
        for i, width in enumerate(w):
            layers: list[nn.Module] = []
            if i > 0:
                layers.append(ResidualDownsampleBlock(w[i - 1], width, shortcut=cfg.residual))
            layers += [ResBlock(width) for _ in range(cfg.blocks_per_stage[i])]
            if cfg.attention and i == len(w) - 1:
                layers.append(AttnBlock(width))
            self.stages.append(nn.Sequential(*layers))
        self.project_in = LatentProjectIn(w[-1], cfg.latent_channels, shortcut=cfg.residual)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.project_in(h)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; ``stages[0]`` works at the latent resolution."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.stage_widths
        s = len(w)
        self.project_out = LatentProjectOut(cfg.latent_channels, w[-1], shortcut=cfg.residual)
        self.stages = nn.ModuleList()
        for k in reversed(range(s)):
            layers: list[nn.Module] = []
            if cfg.attention and k == s - 1:
                layers.append(AttnBlock(w[k]))
            layers += [ResBlock(w[k]) for _ in range(cfg.blocks_per_stage[k])]
            if k > 0:
                layers.append(ResidualUpsampleBlock(w[k], w[k - 1], shortcut=cfg.residual))
            self.stages.append(nn.Sequential(*layers))
        self.head = nn.Sequential(group_norm(w[0]), nn.SiLU(), nn.Conv2d(w[0], cfg.in_channels, 3, padding=1))

    def forward(self, z: Tensor) -> Tensor:
        h = self.project_out(z)
        for stage in self.stages:
            h = stage(h)
        return self.head(h)


class DCAE(nn.Module):
    """Plain (non-variational) autoencoder with spatial compression ``f``.

    ``latent_shift``/``latent_scale`` are per-channel statistics used to
    normalize latents for diffusion training; they are not parameters.
    """

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        c = config.latent_channels
        self.latent_shift = torch.zeros(c, dtype=torch.float64)
        self.latent_scale = torch.ones(c, dtype=torch.float64)
        self.phase_history: list[int] = []

    def encode(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected [N, {cfg.in_channels}, H, W] images, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % cfg.f:
            raise ShapeError(f"height {h} is not divisible by f={cfg.f}")
        if w % cfg.f:
            raise ShapeError(f"width {w} is not divisible by f={cfg.f}")
        return self.encoder(x.contiguous())

    def decode(self, z: Tensor) -> Tensor:
        c = self.config.latent_channels
        if z.dim() != 4 or z.shape[1] != c:
            raise ShapeError(f"expected [N, {c}, h, w] latents, got {tuple(z.shape)}")
        return self.decoder(z.contiguous())

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def normalize_latent(self, z: Tensor) -> Tensor:
        shift = self.latent_shift.to(z).view(1, -1, 1, 1)
        scale = self.latent_scale.to(z).view(1, -1, 1, 1)
        return (z - shift) / scale

    def denormalize_latent(self, z: Tensor) -> Tensor:
        shift = self.latent_shift.to(z).view(1, -1, 1, 1)
        scale = self.latent_scale.to(z).view(1, -1, 1, 1)
        return z * scale + shift

    @torch.no_grad()
    def calibrate(self, images: Tensor, eps: float = 1e-6) -> None:
        """Set the per-channel latent shift/scale from a calibration batch."""
        z = self.encode(images).to(torch.float64)
        self.latent_shift = z.mean(dim=(0, 2, 3))
        self.latent_scale = z.std(dim=(0, 2, 3)).clamp_min(eps)


def build(config: AutoencoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> DCAE:
    """Construct a :class:`DCAE` with parameters drawn deterministically from ``seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DCAE(config)
    return model.to(dtype)


def parameter_groups(model: DCAE) -> dict[str, list[str]]:
    """Partition parameter names into the groups trained by each phase.

    ``encoder_head`` is the last ``middle_stages`` encoder stages plus the
    latent projection; ``decoder_input`` mirrors it on the decoder side;
    ``decoder_head`` is the last ``decoder_head_stages`` decoder stages plus
    the output projection. Everything else lands in ``other``.
    """
    cfg = model.config
    s, m, h = cfg.num_stages, cfg.middle_stages, cfg.decoder_head_stages
    prefixes = {
        "encoder_head": [f"encoder.stages.{i}." for i in range(s - m, s)] + ["encoder.project_in."],
        "decoder_input": ["decoder.project_out."] + [f"decoder.stages.{i}." for i in range(m)],
        "decoder_head": [f"decoder.stages.{i}." for i in range(s - h, s)] + ["decoder.head."],
    }
    groups: dict[str, list[str]] = {name: [] for name in GROUP_NAMES}
    for name, _ in model.named_parameters():
        groups["all"].append(name)
        for group, pre in prefixes.items():
            if name.startswith(tuple(pre)):
                groups[group].append(name)
                break
        else:
            groups["other"].append(name)
    return groups


def count_parameters(model: nn.Module, names: list[str] | None = None) -> int:
    params = dict(model.named_parameters())
    selected = params.values() if names is None else (params[n] for n in names)
    return sum(p.numel() for p in selected)
