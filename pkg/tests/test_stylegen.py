import copy

import pytest
import torch

from stylefield.errors import DivergenceError, ValidationError
from stylefield.seeding import init_module
from stylefield.stylegen.encoder import InversionEncoder, invert
from stylefield.stylegen.generator import (
    GeneratorConfig,
    HiddenFeatureMap,
    LatentCode,
    ToyGenerator,
    generate_geo,
    generate_style,
    map_latent,
    style_mix,
)
from stylefield.stylegen.train import (
    PivotalConfig,
    TrainGanConfig,
    finetune_generator,
    train_generator,
)


def test_default_config_resolution():
    cfg = GeneratorConfig()
    assert cfg.resolution == 64
    assert cfg.stage_resolution(1) == 4
    assert cfg.stage_resolution(5) == 64


def test_bad_configs_rejected():
    with pytest.raises(ValidationError):
        GeneratorConfig(stages=4)  # channel schedule mismatch
    with pytest.raises(ValidationError):
        GeneratorConfig(split_stage=5)


def test_map_latent_deterministic_and_broadcast(small_gen):
    torch.manual_seed(4)
    z = torch.randn(small_gen.config.latent_dim)
    code1 = map_latent(small_gen, z)
    code2 = map_latent(small_gen, z)
    assert torch.equal(code1.stages, code2.stages)
    assert code1.stages.shape == (small_gen.config.stages, small_gen.config.latent_dim)
    assert torch.equal(code1.stages[0], code1.stages[-1])


def test_map_latent_rejects_nonfinite(small_gen):
    z = torch.full((small_gen.config.latent_dim,), float("inf"))
    with pytest.raises(ValidationError):
        map_latent(small_gen, z)


def test_generate_geo_shape_and_style_independence(small_gen):
    torch.manual_seed(1)
    code = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    fmap = generate_geo(small_gen, code, split=2)
    cfg = small_gen.config
    assert fmap.stage == 2
    assert fmap.tensor.shape == (cfg.stage_channels(2), cfg.stage_resolution(2), cfg.stage_resolution(2))
    # perturbing style stages leaves the prefix output unchanged
    other = LatentCode(code.stages.clone())
    other.stages[2:] += 5.0
    fmap2 = generate_geo(small_gen, other, split=2)
    assert torch.equal(fmap.tensor, fmap2.tensor)


@pytest.mark.parametrize("split", [1, 2, 3])
def test_split_consistency_every_split(small_gen, split):
    torch.manual_seed(2)
    code = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    full = small_gen.forward_code(code)
    composed = generate_style(small_gen, generate_geo(small_gen, code, split), code)
    assert torch.allclose(full, composed, atol=1e-6)


def test_generate_style_range_and_tag_checks(small_gen):
    torch.manual_seed(3)
    code = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    fmap = generate_geo(small_gen, code, split=2)
    img = generate_style(small_gen, fmap, code)
    assert ((img >= 0) & (img <= 1)).all()
    bad = HiddenFeatureMap(tensor=fmap.tensor[:, :4, :4], stage=2)
    with pytest.raises(ValidationError):
        generate_style(small_gen, bad, code)


def test_style_mix_self_identity(small_gen):
    torch.manual_seed(5)
    code = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    mixed = style_mix(small_gen, code, code, split=2)
    assert torch.allclose(mixed, small_gen.forward_code(code), atol=1e-6)


def test_style_mix_deterministic(small_gen):
    torch.manual_seed(6)
    a = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    b = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    m1 = style_mix(small_gen, a, b)
    m2 = style_mix(small_gen, a, b)
    assert torch.equal(m1, m2)


def test_encoder_refinement_identity_at_init(small_gen):
    enc = InversionEncoder(small_gen.config)
    init_module(enc, 17)
    enc.zero_refinement()
    torch.manual_seed(7)
    img = torch.rand(3, small_gen.config.resolution, small_gen.config.resolution)
    with torch.no_grad():
        base = enc.base_code(img[None])[0]
        refined = enc(img[None])[0]
    assert torch.allclose(base, refined, atol=1e-7)
    code = invert(small_gen, enc, img)
    assert torch.allclose(code.stages[0], base, atol=1e-7)


def test_invert_rejects_wrong_resolution(small_gen):
    enc = InversionEncoder(small_gen.config)
    with pytest.raises(ValidationError):
        invert(small_gen, enc, torch.rand(3, 16, 16))


def test_pivotal_zero_iterations_is_identity(small_gen):
    torch.manual_seed(8)
    code = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    target = torch.rand(3, small_gen.config.resolution, small_gen.config.resolution)
    tuned, trace = finetune_generator(small_gen, code, target, PivotalConfig(iterations=0))
    assert trace == []
    for p0, p1 in zip(small_gen.parameters(), tuned.parameters()):
        assert torch.equal(p0, p1)


def test_pivotal_reduces_reconstruction_error(small_gen):
    torch.manual_seed(9)
    gen = copy.deepcopy(small_gen)
    code = map_latent(gen, torch.randn(gen.config.latent_dim))
    target = torch.rand(3, gen.config.resolution, gen.config.resolution) * 0.5 + 0.25
    before = float(((gen.forward_code(code) - target) ** 2).mean())
    tuned, trace = finetune_generator(gen, code, target, PivotalConfig(iterations=120, lr=2e-3))
    after = float(((tuned.forward_code(code) - target) ** 2).mean())
    assert after <= 0.5 * before
    t1, _ = finetune_generator(gen, code, target, PivotalConfig(iterations=20))
    t2, _ = finetune_generator(gen, code, target, PivotalConfig(iterations=20))
    for p1, p2 in zip(t1.parameters(), t2.parameters()):
        assert torch.equal(p1, p2)


def gan_dataset(resolution=32):
    from stylefield.scenes import SceneSpec, synth_scene

    spec = SceneSpec(
        resolution=(resolution, resolution),
        theta_count=5,
        phi_count=2,
        theta_range=(-0.5, 0.5),
        phi_range=(-0.2, 0.2),
    )
    return synth_scene(spec, seed=2)


def test_gan_training_deterministic_trace(small_gen_config):
    ds = gan_dataset()
    cfg = TrainGanConfig(iterations=8, batch=2, r1_every=4)
    _, _, t1 = train_generator(ds, cfg, small_gen_config, seed=3)
    _, _, t2 = train_generator(ds, cfg, small_gen_config, seed=3)
    assert t1 == t2


def test_gan_rejects_out_of_cone_dataset(small_gen_config):
    from stylefield.scenes import SceneSpec, synth_scene

    spec = SceneSpec(
        resolution=(32, 32), theta_count=4, phi_count=1,
        theta_range=(-3.0, 3.0), phi_range=(0.0, 0.0),
    )
    ds = synth_scene(spec, seed=2)
    with pytest.raises(ValidationError):
        train_generator(ds, TrainGanConfig(iterations=2, batch=2), small_gen_config, seed=0)


def test_gan_mode_collapse_heuristic_aborts(small_gen_config):
    ds = gan_dataset()
    cfg = TrainGanConfig(iterations=50, batch=2, collapse_floor=10.0, collapse_patience=3)
    with pytest.raises(DivergenceError) as err:
        train_generator(ds, cfg, small_gen_config, seed=0)
    assert "collapse" in str(err.value)


def test_interpolate_codes_endpoints_and_bounds(small_gen):
    from stylefield.stylegen.generator import interpolate_codes

    torch.manual_seed(11)
    a = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    b = map_latent(small_gen, torch.randn(small_gen.config.latent_dim))
    assert torch.allclose(interpolate_codes(a, b, 0.0).stages, a.stages)
    assert torch.allclose(interpolate_codes(a, b, 1.0).stages, b.stages)
    mid = interpolate_codes(a, b, 0.5)
    assert torch.allclose(mid.stages, 0.5 * (a.stages + b.stages))
    with pytest.raises(ValidationError):
        interpolate_codes(a, b, 1.5)
