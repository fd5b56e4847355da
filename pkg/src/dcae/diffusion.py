"""Toy latent diffusion transformer.

Tokens are built from ``p x p`` latent patches. A patch vector lists its
elements as ``(dy, dx, c)`` with the channel index minor, which differs from
the space-to-channel layout ``(c, dy, dx)``; :func:`shuffle_permutation` maps
between the two so that patch size ``p`` can be replaced by
``space_to_channel(z, p)`` followed by patch size 1.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class DiffusionConfig:
    patch_size: int = 1
    width: int = 256
    depth: int = 6
    heads: int = 4
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_classes: int = 0
    cfg_scale: float = 1.5
    sample_steps: int = 50
    class_dropout: float = 0.1

    def __post_init__(self):
        if self.patch_size < 1 or self.timesteps < 1:
            raise ConfigError("patch_size and timesteps must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} must be divisible by heads {self.heads}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.cfg_scale < 1:
            raise ConfigError("cfg_scale must be >= 1")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ConfigError("sample_steps must lie in [1, timesteps]")

    def to_dict(self) -> dict:
        return asdict(self)


def token_count(image_hw: int, f: int, p: int) -> int:
    """Number of transformer tokens for a square image: ``(image_hw / (f * p))**2``."""
    if f < 1 or p < 1:
        raise ShapeError("f and p must be positive")
    if image_hw % (f * p):
        raise ShapeError(f"image size {image_hw} is not divisible by f*p = {f * p}")
    return (image_hw // (f * p)) ** 2


def patch_vectors(z: Tensor, p: int) -> Tensor:
    """``[N, C, H, W] -> [N, (H/p)*(W/p), p*p*C]``, tokens in raster order."""
    n, c, h, w = z.shape
    if h % p or w % p:
        raise ShapeError(f"latent {h}x{w} is not divisible by patch size {p}")
    z = z.reshape(n, c, h // p, p, w // p, p)
    z = z.permute(0, 2, 4, 3, 5, 1)  # n, i, j, dy, dx, c
    return z.reshape(n, (h // p) * (w // p), p * p * c)


def unpatch_vectors(tokens: Tensor, p: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patch_vectors`."""
    n = tokens.shape[0]
    hp, wp = height // p, width // p
    z = tokens.reshape(n, hp, wp, p, p, channels)
    z = z.permute(0, 5, 1, 3, 2, 4)  # n, c, i, dy, j, dx
    return z.reshape(n, channels, height, width)


def patchify(z: Tensor, p: int, projection: nn.Module) -> Tensor:
    return projection(patch_vectors(z, p))


def shuffle_permutation(channels: int, p: int) -> Tensor:
    """Index ``perm`` with ``W[:, perm]`` acting on space-to-channel features.

    Space-to-channel feature ``c*p*p + dy*p + dx`` holds the same element as
    patch-vector entry ``(dy*p + dx)*channels + c``.
    """
    c = torch.arange(channels).view(-1, 1, 1)
    d = torch.arange(p)
    perm = (d.view(1, -1, 1) * p + d.view(1, 1, -1)) * channels + c
    return perm.reshape(-1)


class NoiseSchedule:
    """Linear beta schedule with cumulative products kept in float64."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    def q_sample(self, z0: Tensor, t: Tensor, noise: Tensor) -> Tensor:
        ab = self.alphas_cumprod[t].to(z0).view(-1, 1, 1, 1)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        q, k, v = self.qkv(x).reshape(n, l, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(n, l, d))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaptive LayerNorm and zero-initialized gates."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(approximate="tanh"), nn.Linear(4 * width, width))
        self.ada = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        s1, sc1, g1, s2, sc2, g2 = self.ada(F.silu(cond)).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(_modulate(self.norm1(x), s1, sc1))
        return x + g2.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), s2, sc2))


class ToyDiT(nn.Module):
    """Noise-prediction transformer over ``[N, C, H, W]`` latents."""

    def __init__(self, config: DiffusionConfig, latent_channels: int, latent_size: int):
        super().__init__()
        p = config.patch_size
        if latent_size % p:
            raise ConfigError(f"patch size {p} does not divide latent size {latent_size}")
        self.config = config
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        d = config.width
        self.num_tokens = (latent_size // p) ** 2
        self.patch_embed = nn.Linear(latent_channels * p * p, d)
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_tokens, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        # last row is the null class used for unconditional / guided sampling
        self.class_embed = nn.Embedding(config.num_classes + 1, d) if config.num_classes > 0 else None
        self.blocks = nn.ModuleList(DiTBlock(d, config.heads) for _ in range(config.depth))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, latent_channels * p * p)
        for m in (self.ada_out, self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    @property
    def null_class(self) -> int:
        return self.config.num_classes

    def forward(self, x: Tensor, t: Tensor, y: Tensor | None = None) -> Tensor:
        n, c, h, w = x.shape
        if c != self.latent_channels or h != self.latent_size or w != self.latent_size:
            raise ShapeError(
                f"expected latents [N, {self.latent_channels}, {self.latent_size}, {self.latent_size}], got {tuple(x.shape)}"
            )
        p = self.config.patch_size
        tokens = patchify(x, p, self.patch_embed) + self.pos_embed
        cond = self.time_mlp(timestep_embedding(t, self.config.width).to(x.dtype))
        if self.class_embed is not None:
            if y is None:
                y = torch.full((n,), self.null_class, dtype=torch.long)
            cond = cond + self.class_embed(y)
        for block in self.blocks:
            tokens = block(tokens, cond)
        shift, scale = self.ada_out(F.silu(cond)).chunk(2, dim=-1)
        tokens = self.out(_modulate(self.norm_out(tokens), shift, scale))
        return unpatch_vectors(tokens, p, c, h, w)


def build_dit(config: DiffusionConfig, latent_channels: int, latent_size: int, seed: int = 0,
              dtype: torch.dtype = torch.float32) -> ToyDiT:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyDiT(config, latent_channels, latent_size)
    return model.to(dtype)


def _check_labels(model: nn.Module, labels, n: int) -> Tensor | None:
    num_classes = getattr(getattr(model, "config", None), "num_classes", 0)
    if labels is None:
        return None
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(n)
    if num_classes == 0:
        return None
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} class labels, got shape {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"class ids must lie in [0, {num_classes}), got {labels.tolist()}")
    return labels


def diffusion_loss(model, schedule: NoiseSchedule, z0: Tensor, labels=None,
                   generator: torch.Generator | None = None, class_dropout: float = 0.0) -> Tensor:
    """Epsilon-prediction MSE at uniformly drawn timesteps.

    Timesteps, noise and label dropout are all drawn from ``generator`` in
    that order, so the loss is a deterministic function of its state.
    """
    n = z0.shape[0]
    labels = _check_labels(model, labels, n)
    t = torch.randint(0, schedule.timesteps, (n,), generator=generator)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    if labels is not None and class_dropout > 0:
        drop = torch.rand(n, generator=generator) < class_dropout
        labels = torch.where(drop, torch.full_like(labels, model.null_class), labels)
    x_t = schedule.q_sample(z0, t, noise)
    pred = model(x_t, t, labels)
    return F.mse_loss(pred, noise)


class DiffusionTrainer:
    """Single-writer training loop state: model, schedule and AdamW optimizer."""

    def __init__(self, model: ToyDiT, lr: float = 1e-4, weight_decay: float = 0.0):
        self.model = model
        self.schedule = NoiseSchedule.from_config(model.config)
        self.opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)
        self.step_count = 0

    def train_step(self, z0: Tensor, labels=None, generator: torch.Generator | None = None) -> float:
        self.model.train()
        loss = diffusion_loss(self.model, self.schedule, z0, labels, generator,
                              class_dropout=self.model.config.class_dropout)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite diffusion loss at step {self.step_count}", step=self.step_count)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return loss.item()


@torch.no_grad()
def sample(model: ToyDiT, n: int, class_label=None, cfg_scale: float = 1.0, steps: int | None = None,
           seed: int = 0, schedule: NoiseSchedule | None = None) -> Tensor:
    """Deterministic DDIM sampling of ``n`` normalized latents.

    With a class-conditional model and ``cfg_scale > 1`` the prediction is
    ``eps_uncond + cfg_scale * (eps_cond - eps_uncond)``; at ``cfg_scale == 1``
    only the conditional branch is evaluated. ``class_label=None`` samples
    from the null class.
    """
    cfg = model.config
    schedule = schedule or NoiseSchedule.from_config(cfg)
    steps = steps or cfg.sample_steps
    if not 1 <= steps <= schedule.timesteps:
        raise ValueError(f"steps must lie in [1, {schedule.timesteps}], got {steps}")
    if cfg_scale < 1:
        raise ValueError("cfg_scale must be >= 1")
    model.eval()
    dtype = next(model.parameters()).dtype
    labels = _check_labels(model, class_label, n)
    guided = labels is not None and cfg_scale != 1.0
    g = torch.Generator().manual_seed(seed)
    shape = (n, model.latent_channels, model.latent_size, model.latent_size)
    x = torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)
    ts = torch.linspace(schedule.timesteps - 1, 0, steps, dtype=torch.float64).round().long()
    ab_all = schedule.alphas_cumprod
    for i, t in enumerate(ts):
        tb = t.expand(n)
        if guided:
            null = torch.full_like(labels, model.null_class)
            both = model(torch.cat([x, x]), torch.cat([tb, tb]), torch.cat([labels, null]))
            eps_c, eps_u = both.chunk(2)
            eps = eps_u + cfg_scale * (eps_c - eps_u)
        else:
            eps = model(x, tb, labels)
        ab = ab_all[t].to(dtype)
        ab_prev = ab_all[ts[i + 1]].to(dtype) if i + 1 < len(ts) else torch.ones((), dtype=dtype)
        x0 = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
        x = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
    return x


def token_grid(image_hw: int = 512) -> list[dict]:
    """Autoencoder/patch-size combinations of the token ablation and their token counts."""
    rows = [(8, 4), (16, 2), (32, 1), (8, 8), (16, 4), (32, 2), (64, 1)]
    return [{"f": f, "p": p, "tokens": token_count(image_hw, f, p)} for f, p in rows]
