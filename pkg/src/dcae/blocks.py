"""Learnable blocks with non-parametric space-to-channel shortcuts.

Every block computes ``branch(x) + shortcut(x)``. The last layer of each
branch is zero-initialized, so a freshly built block returns its shortcut
exactly.
"""

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError
from .shuffle_ops import channel_average, channel_duplicate, channel_to_space, space_to_channel


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels, eps=1e-6)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """Two 3x3 convs with an identity skip; channel count is preserved."""

    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        self.norm1 = group_norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if zero_init:
            zero_module(self.conv2)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with an identity skip."""

    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        if zero_init:
            zero_module(self.proj)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class ResidualDownsampleBlock(nn.Module):
    """Halve the resolution; shortcut is space-to-channel then channel averaging.

    ``[N, C, H, W] -> [N, C_out, H/2, W/2]`` with averaging group
    ``g = 4 * C / C_out``.
    """

    def __init__(self, in_channels: int, out_channels: int, shortcut: bool = True):
        super().__init__()
        if (4 * in_channels) % out_channels:
            raise ConfigError(
                f"downsample {in_channels}->{out_channels}: output channels must divide "
                f"4 * input channels = {4 * in_channels}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.group = 4 * in_channels // out_channels
        self.use_shortcut = shortcut
        self.branch = nn.Sequential(
            ResBlock(in_channels),
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
        )
        if shortcut:
            zero_module(self.branch[-1])

    def shortcut(self, x: Tensor) -> Tensor:
        return channel_average(space_to_channel(x, 2), self.group)

    def forward(self, x: Tensor) -> Tensor:
        out = self.branch(x)
        if self.use_shortcut:
            out = out + self.shortcut(x)
        return out


class ResidualUpsampleBlock(nn.Module):
    """Double the resolution; shortcut is channel-to-space then channel duplicating.

    ``[N, C, H, W] -> [N, C_out, 2H, 2W]`` with duplication group
    ``g = C_out / (C / 4)``.
    """

    def __init__(self, in_channels: int, out_channels: int, shortcut: bool = True):
        super().__init__()
        if in_channels % 4:
            raise ConfigError(f"upsample {in_channels}->{out_channels}: input channels must be divisible by 4")
        if out_channels % (in_channels // 4):
            raise ConfigError(
                f"upsample {in_channels}->{out_channels}: input channels / 4 = {in_channels // 4} "
                f"must divide output channels"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.group = out_channels // (in_channels // 4)
        self.use_shortcut = shortcut
        self.res = ResBlock(in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        if shortcut:
            zero_module(self.conv)

    def branch(self, x: Tensor) -> Tensor:
        h = F.interpolate(self.res(x), scale_factor=2.0, mode="nearest")
        return self.conv(h)

    def shortcut(self, x: Tensor) -> Tensor:
        return channel_duplicate(channel_to_space(x, 2), self.group)

    def forward(self, x: Tensor) -> Tensor:
        out = self.branch(x)
        if self.use_shortcut:
            out = out + self.shortcut(x)
        return out


class LatentProjectIn(nn.Module):
    """Encoder head into the latent: ``[N, C_enc, h, w] -> [N, c, h, w]``."""

    def __init__(self, in_channels: int, latent_channels: int, shortcut: bool = True):
        super().__init__()
        if in_channels % latent_channels:
            raise ConfigError(
                f"latent channels {latent_channels} must divide encoder width {in_channels}"
            )
        self.group = in_channels // latent_channels
        self.use_shortcut = shortcut
        self.norm = group_norm(in_channels)
        self.conv = nn.Conv2d(in_channels, latent_channels, 3, padding=1)
        if shortcut:
            zero_module(self.conv)

    def branch(self, x: Tensor) -> Tensor:
        return self.conv(F.silu(self.norm(x)))

    def shortcut(self, x: Tensor) -> Tensor:
        return channel_average(x, self.group)

    def forward(self, x: Tensor) -> Tensor:
        out = self.branch(x)
        if self.use_shortcut:
            out = out + self.shortcut(x)
        return out


class LatentProjectOut(nn.Module):
    """Decoder input from the latent: ``[N, c, h, w] -> [N, C_dec, h, w]``."""

    def __init__(self, latent_channels: int, out_channels: int, shortcut: bool = True):
        super().__init__()
        if out_channels % latent_channels:
            raise ConfigError(
                f"latent channels {latent_channels} must divide decoder width {out_channels}"
            )
        self.group = out_channels // latent_channels
        self.use_shortcut = shortcut
        self.conv = nn.Conv2d(latent_channels, out_channels, 3, padding=1)
        if shortcut:
            zero_module(self.conv)

    def branch(self, z: Tensor) -> Tensor:
        return self.conv(z)

    def shortcut(self, z: Tensor) -> Tensor:
        return channel_duplicate(z, self.group)

    def forward(self, z: Tensor) -> Tensor:
        out = self.branch(z)
        if self.use_shortcut:
            out = out + self.shortcut(z)
        return out
