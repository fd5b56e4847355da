import pytest
import torch

from dcae.errors import ConfigError, ShapeError
from dcae.model import AutoencoderConfig, build, count_parameters, parameter_groups, preset
from _oracles import decoder_cascade, encoder_cascade


@pytest.mark.parametrize("name,res,shape", [
    ("f32c32", 256, (32, 8, 8)),
    ("f64c128", 512, (128, 8, 8)),
    ("f128c512", 1024, (512, 8, 8)),
    ("f64c128", 256, (128, 4, 4)),
    ("f128c512", 512, (512, 4, 4)),
])
def test_preset_latent_shapes(name, res, shape):
    cfg = preset(name)
    assert cfg.latent_shape(res) == shape
    # shape inference on the meta device avoids allocating full-size activations
    model = build(cfg, 0).to("meta")
    z = model.encode(torch.empty(1, 3, res, res, device="meta"))
    assert tuple(z.shape) == (1, *shape)
    assert tuple(model.decode(z).shape) == (1, 3, res, res)


def test_total_latent_size_is_shared_by_presets():
    sizes = {name: (1024 // preset(name).f) ** 2 * preset(name).latent_channels
             for name in ("f32c32", "f64c128", "f128c512")}
    assert len(set(sizes.values())) == 1


def test_zero_init_encoder_and_decoder_are_shortcut_cascades(tiny_config, images64):
    model = build(tiny_config, 0)
    with torch.no_grad():
        z = model.encode(images64)
        assert torch.equal(z, encoder_cascade(model, images64))
        assert torch.equal(model.decode(z), decoder_cascade(model, z))
        assert model.decode(z).shape == images64.shape


def test_encode_rejects_indivisible_resolution(tiny_config):
    model = build(tiny_config, 0)
    with pytest.raises(ShapeError, match="height"):
        model.encode(torch.zeros(1, 3, 48, 64))
    with pytest.raises(ShapeError):
        model.decode(torch.zeros(1, 16, 2, 2))


def test_builds_are_deterministic(tiny_config):
    a, b = build(tiny_config, 7), build(tiny_config, 7)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    c = build(tiny_config, 8)
    assert not torch.equal(a.encoder.stem.weight, c.encoder.stem.weight)


def test_encode_is_reproducible(tiny_config, images64):
    model = build(tiny_config, 0)
    with torch.no_grad():
        assert torch.equal(model.encode(images64), model.encode(images64))


@pytest.mark.parametrize("kwargs,match", [
    (dict(f=16), "f=16"),
    (dict(f=24), "power of two"),
    (dict(blocks_per_stage=[1, 1]), "blocks_per_stage"),
    (dict(latent_channels=48), "latent_channels"),
    (dict(stage_widths=[8, 16, 96, 32, 32, 64]), "downsample"),
    (dict(middle_stages=3, decoder_head_stages=4), "overlap"),
])
def test_config_violations_are_named(kwargs, match):
    base = dict(f=32, latent_channels=32, stage_widths=[8, 16, 32, 32, 32, 64], blocks_per_stage=[0] * 6)
    base.update(kwargs)
    with pytest.raises(ConfigError, match=match):
        AutoencoderConfig(**base)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        AutoencoderConfig.from_dict({"f": 32, "bogus": 1})


def test_parameter_groups_partition(tiny_config):
    model = build(tiny_config, 0)
    groups = parameter_groups(model)
    parts = [set(groups[k]) for k in ("encoder_head", "decoder_input", "decoder_head", "other")]
    assert set().union(*parts) == set(groups["all"])
    assert sum(len(p) for p in parts) == len(groups["all"])
    middle = set(groups["encoder_head"]) | set(groups["decoder_input"])
    assert 0 < len(middle) < len(groups["all"])
    assert all(len(p) > 0 for p in parts)


def test_parameter_groups_follow_stage_boundaries(tiny_config):
    groups = parameter_groups(build(tiny_config, 0))
    assert all(n.startswith(("encoder.stages.5.", "encoder.project_in.")) for n in groups["encoder_head"])
    assert all(n.startswith(("decoder.project_out.", "decoder.stages.0.")) for n in groups["decoder_input"])
    assert all(n.startswith(("decoder.stages.5.", "decoder.head.")) for n in groups["decoder_head"])


def test_moving_the_middle_boundary_grows_the_group(tiny_config):
    narrow = parameter_groups(build(tiny_config, 0))
    cfg = preset("f32c32", base_width=8, blocks_per_stage=[1, 0, 0, 0, 0, 1], middle_stages=2)
    wide = parameter_groups(build(cfg, 0))
    assert set(narrow["encoder_head"]) < set(wide["encoder_head"])


def test_default_group_sizes_are_stable():
    model = build(AutoencoderConfig(), 0)
    groups = parameter_groups(model)
    counts = {k: count_parameters(model, v) for k, v in groups.items()}
    assert counts["all"] == sum(counts[k] for k in ("encoder_head", "decoder_input", "decoder_head", "other"))
    # regression freeze, not an independent oracle
    assert counts == {
        "all": 35502627,
        "encoder_head": 7231520,
        "decoder_input": 10771200,
        "decoder_head": 75971,
        "other": 17423936,
    }


def test_calibration_normalizes_latents(tiny_config, images64):
    model = build(tiny_config, 0)
    x = torch.rand(8, 3, 64, 64) * 2 - 1
    model.calibrate(x)
    z = model.normalize_latent(model.encode(x).double())
    torch.testing.assert_close(z.mean(dim=(0, 2, 3)), torch.zeros(32, dtype=torch.float64), atol=1e-6, rtol=0)
    torch.testing.assert_close(model.denormalize_latent(z), model.encode(x).double(), atol=1e-5, rtol=0)
