"""Reconstruction metrics: PSNR, SSIM and a Frechet distance over embeddings.

The default embedder is a frozen, randomly initialized conv net. Its scores
are only comparable with each other, not with Inception-based FID values.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError

INFINITE_PSNR = math.inf


def psnr(x: Tensor, y: Tensor, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs are equal."""
    if x.shape != y.shape:
        raise ShapeError(f"psnr shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = torch.mean((x.double() - y.double()) ** 2).item()
    if mse == 0:
        return INFINITE_PSNR
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float, dtype) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(x: Tensor, y: Tensor, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"ssim shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ShapeError("ssim expects [N, C, H, W] inputs")
    n, c, h, w = x.shape
    if h < win_size or w < win_size:
        raise ShapeError(f"image {h}x{w} is smaller than the {win_size}x{win_size} ssim window")
    x, y = x.double(), y.double()
    win = _gaussian_window(win_size, sigma, torch.float64).expand(c, 1, win_size, win_size)
    filt = lambda t: F.conv2d(t, win, groups=c)  # noqa: E731
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: Tensor, y: Tensor, data_range: float = 2.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    return ssim_map(x, y, data_range).mean().item()


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least 2 feature vectors to estimate a covariance")
        cov = np.cov(feats, rowvar=False)
        return cls(feats.mean(axis=0), (cov + cov.T) / 2)


def _psd_sqrt(cov: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -tol:
        raise ValueError(f"covariance is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the matrix square root is taken as the sum of square roots of
    the eigenvalues of ``sqrt(S_a) S_b sqrt(S_a)``, which is symmetric PSD and
    shares its spectrum with ``S_a S_b``. Eigenvalues down to ``-tol`` are
    clamped to zero; anything more negative is rejected.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    root_a = _psd_sqrt(a.cov, tol)
    _psd_sqrt(b.cov, tol)
    m = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    if vals.min() < -tol:
        raise ValueError(f"product covariance has eigenvalue {vals.min():.3g} below tolerance")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt
    return float(max(value, 0.0))


class Embedder(Protocol):
    def __call__(self, images: Tensor) -> Tensor: ...


class RandomConvEmbedder(nn.Module):
    """Frozen random conv net mapping ``[N, 3, H, W]`` images to ``dim`` features."""

    def __init__(self, dim: int = 64, in_channels: int = 3, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(64, dim, 3, stride=2, padding=1), nn.GELU(),
            )
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: Tensor) -> Tensor:
        h = self.net(images.float())
        # mean and spatial std pooling keep both color and texture statistics
        return h.mean(dim=(2, 3)) + h.std(dim=(2, 3), unbiased=False)


@torch.no_grad()
def embed(images: Tensor, embedder: Callable[[Tensor], Tensor], batch_size: int = 64) -> np.ndarray:
    feats = [embedder(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(feats).double().cpu().numpy()


def embed_and_score(real_images: Tensor, fake_images: Tensor, embedder: Callable[[Tensor], Tensor] | None = None) -> float:
    """Frechet distance between embedder features of two image sets."""
    if real_images.shape[0] < 2 or fake_images.shape[0] < 2:
        raise ValueError("need at least 2 images per side to estimate covariances")
    embedder = embedder or RandomConvEmbedder()
    a = GaussianStats.from_features(embed(real_images, embedder))
    b = GaussianStats.from_features(embed(fake_images, embedder))
    return frechet_distance(a, b)


def lpips(x: Tensor, y: Tensor, model: Callable[[Tensor, Tensor], Tensor]) -> float:
    """Perceptual distance through a caller-supplied network (none is bundled)."""
    if x.shape != y.shape:
        raise ShapeError(f"lpips shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float(model(x, y).mean())


@dataclass
class MetricRecord:
    metric: str
    value: float
    config_id: str
    resolution: int

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(self.value):
            d["value"] = "inf"
        return json.dumps(d)
