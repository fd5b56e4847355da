import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import frechet_mpmath, psnr_loop
from dcae.errors import ShapeError
from dcae.metrics import (
    GaussianStats, MetricRecord, RandomConvEmbedder, embed_and_score, frechet_distance, lpips, psnr, ssim,
)


def random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T / d


def test_psnr_examples():
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1, data_range=1.0) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_scalar_loop():
    g = torch.Generator().manual_seed(1)
    x, y = torch.rand(2, 3, 6, 6, generator=g, dtype=torch.float64), torch.rand(2, 3, 6, 6, generator=g, dtype=torch.float64)
    assert psnr(x, y) == pytest.approx(psnr_loop(x.numpy(), y.numpy(), 2.0), abs=1e-9)


def test_psnr_errors():
    with pytest.raises(ShapeError):
        psnr(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
    with pytest.raises(ValueError):
        psnr(torch.zeros(1), torch.ones(1), data_range=0)


def test_psnr_decreases_with_noise_amplitude():
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0)) * 2 - 1
    noise = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1)) * 2 - 1
    values = [psnr(x, x + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.3, 0.6)]
    assert all(a > b for a, b in zip(values, values[1:]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), size=st.integers(11, 20))
def test_ssim_self_similarity_is_exactly_one(seed, size):
    x = torch.rand(1, 3, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    assert ssim(x, x) == 1.0


def test_ssim_of_constants_is_the_luminance_term():
    a, b, data_range = 0.3, -0.5, 2.0
    c1 = (0.01 * data_range) ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim(torch.full((1, 1, 12, 12), a), torch.full((1, 1, 12, 12), b))
    assert got == pytest.approx(expected, abs=1e-7)


def test_ssim_of_negated_zero_mean_pattern_is_near_minus_one():
    i, j = torch.meshgrid(torch.arange(16), torch.arange(16), indexing="ij")
    x = ((-1.0) ** (i + j)).expand(1, 3, 16, 16)
    assert ssim(x, -x) < -0.99


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError, match="window"):
        ssim(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))


def test_frechet_examples():
    a = GaussianStats([0.0], [[1.0]])
    b = GaussianStats([2.0], [[1.0]])
    assert frechet_distance(a, b) == 4.0
    rng = np.random.default_rng(0)
    s = GaussianStats(rng.standard_normal(6), random_psd(rng, 6))
    assert abs(frechet_distance(s, s)) <= 1e-8


@pytest.mark.parametrize("seed,d,rank", [(0, 3, None), (1, 5, None), (2, 6, None), (3, 8, None)])
def test_frechet_matches_high_precision_oracle(seed, d, rank):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
    s1, s2 = random_psd(rng, d, rank), random_psd(rng, d)
    got = frechet_distance(GaussianStats(mu1, s1), GaussianStats(mu2, s2))
    assert got == pytest.approx(frechet_mpmath(mu1, s1, mu2, s2), rel=1e-7, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), d=st.integers(1, 6))
def test_frechet_is_symmetric_and_non_negative(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianStats(rng.standard_normal(d), random_psd(rng, d))
    b = GaussianStats(rng.standard_normal(d), random_psd(rng, d, rank=max(1, d // 2)))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert abs(ab - ba) <= 1e-8 * max(1.0, ab)


def test_frechet_errors():
    with pytest.raises(ShapeError):
        frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))
    with pytest.raises(ValueError, match="positive semi-definite"):
        frechet_distance(GaussianStats([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))
    with pytest.raises(ValueError, match="symmetric"):
        GaussianStats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_embed_and_score_examples():
    g = torch.Generator().manual_seed(0)
    real = torch.rand(8, 3, 32, 32, generator=g) * 2 - 1
    emb = RandomConvEmbedder()
    assert embed_and_score(real, real, emb) == pytest.approx(0.0, abs=1e-8)
    red = torch.zeros(8, 3, 32, 32)
    red[:, 0] = 1
    blue = torch.zeros(8, 3, 32, 32)
    blue[:, 2] = 1
    blue = blue + 0.01 * torch.rand(8, 3, 32, 32, generator=g)
    red = red + 0.01 * torch.rand(8, 3, 32, 32, generator=g)
    assert embed_and_score(red, blue, emb) > 0
    with pytest.raises(ValueError, match="at least 2"):
        embed_and_score(real[:1], real, emb)


def test_embedder_is_fixed_by_seed():
    x = torch.rand(4, 3, 32, 32)
    assert torch.equal(RandomConvEmbedder(seed=3)(x), RandomConvEmbedder(seed=3)(x))
    assert RandomConvEmbedder()(x).shape == (4, 64)


def test_score_falls_along_interpolation_to_real():
    wins = 0
    for seed in range(3):
        g = torch.Generator().manual_seed(seed)
        real = torch.rand(32, 3, 32, 32, generator=g) * 2 - 1
        fake = torch.rand(32, 3, 32, 32, generator=g) * 0.2 - 0.8
        emb = RandomConvEmbedder(seed=seed)
        scores = [embed_and_score(real, (1 - t) * fake + t * real, emb) for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
        wins += all(a > b for a, b in zip(scores, scores[1:]))
    assert wins >= 2


def test_lpips_slot_uses_supplied_model():
    x, y = torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4)
    assert lpips(x, y, lambda a, b: (a - b).abs().mean(dim=(1, 2, 3))) == 1.0


def test_metric_record_serializes_infinity():
    rec = json.loads(MetricRecord("psnr", math.inf, "f32c32", 64).to_json())
    assert rec == {"metric": "psnr", "value": "inf", "config_id": "f32c32", "resolution": 64}
