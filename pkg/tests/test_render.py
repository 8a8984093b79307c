import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from stylefield.errors import ValidationError
from stylefield.field import ConditionedField, FieldConfig, composite, render_image
from stylefield.field.encoding import HashGridConfig
from stylefield.field.render import composite_weights, render_rays, stratified_ts


def small_field():
    cfg = FieldConfig(
        grid=HashGridConfig(levels=2, table_size=64, features=2, min_res=4, max_res=8),
        hidden=16,
        geo_features=7,
        embed_hidden=8,
        embed_dim=8,
        dir_freqs=2,
        n_samples=8,
        n_appearances=3,
    )
    return ConditionedField(cfg)


def test_hand_composite_half_quarter():
    t_vals = torch.tensor([[0.0, 1.0]])
    s = math.log(2.0)
    sigmas = torch.tensor([[s, s]])
    colors = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    color, depth, opacity, weights = composite(sigmas, colors, t_vals, far=2.0)
    assert torch.allclose(weights, torch.tensor([[0.5, 0.25]]), atol=1e-7)
    assert torch.allclose(color, torch.tensor([[0.5, 0.25, 0.0]]), atol=1e-7)
    assert opacity[0] == pytest.approx(0.75, abs=1e-7)


def test_empty_space():
    t_vals = torch.linspace(0, 1, 8)[None]
    sigmas = torch.zeros(1, 8)
    colors = torch.rand(1, 8, 3)
    color, depth, opacity, _ = composite(sigmas, colors, t_vals, far=1.5)
    assert torch.allclose(color, torch.zeros(1, 3))
    assert opacity[0] == 0.0
    assert depth[0] == pytest.approx(1.5)


def test_opaque_first_sample():
    t_vals = torch.tensor([[0.3, 0.4, 0.5]])
    sigmas = torch.tensor([[200.0, 1.0, 1.0]])  # sigma*delta = 20
    colors = torch.rand(1, 3, 3)
    color, depth, opacity, _ = composite(sigmas, colors, t_vals, far=0.6)
    assert torch.allclose(color[0], colors[0, 0], atol=1e-6)
    assert depth[0] == pytest.approx(0.3, abs=1e-6)
    assert opacity[0] == pytest.approx(1.0, abs=1e-6)


@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_transmittance_monotone_and_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    sigmas = torch.rand(4, 16, generator=g) * 40
    deltas = torch.rand(4, 16, generator=g) * 0.1 + 1e-4
    weights, trans = composite_weights(sigmas, deltas)
    assert (weights >= 0).all()
    assert (trans[:, 1:] <= trans[:, :-1] + 1e-7).all()
    assert (weights.sum(dim=1) <= 1.0 + 1e-6).all()


@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_appending_sample_never_decreases_opacity(seed):
    g = torch.Generator().manual_seed(seed)
    sigmas = torch.rand(2, 9, generator=g) * 30
    deltas = torch.rand(2, 9, generator=g) * 0.1 + 1e-4
    w_full, _ = composite_weights(sigmas, deltas)
    w_head, _ = composite_weights(sigmas[:, :-1], deltas[:, :-1])
    assert (w_full.sum(dim=1) + 1e-8 >= w_head.sum(dim=1)).all()


def test_stratified_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        stratified_ts(4, 1, 0.0, 1.0, seed=0)
    with pytest.raises(ValidationError):
        stratified_ts(4, 8, 1.0, 1.0, seed=0)


def test_stratified_jitter_is_per_ray_hash():
    full = stratified_ts(10, 6, 0.5, 1.5, seed=9)
    subset = stratified_ts(3, 6, 0.5, 1.5, seed=9, ray_ids=torch.tensor([2, 5, 7]))
    assert torch.equal(full[[2, 5, 7]], subset)


def test_render_rays_subset_matches_full():
    field = small_field()
    g = torch.Generator().manual_seed(0)
    origins = torch.zeros(6, 3)
    origins[:, 2] = 1.3
    dirs = torch.nn.functional.normalize(
        torch.randn(6, 3, generator=g) * 0.05 + torch.tensor([0.0, 0.0, -1.0]), dim=-1
    )
    with torch.no_grad():
        full = render_rays(field, origins, dirs, 0.9, 1.7, 0, 0, jitter_seed=4,
                           ray_ids=torch.arange(6))
        part = render_rays(field, origins[2:4], dirs[2:4], 0.9, 1.7, 0, 0, jitter_seed=4,
                           ray_ids=torch.arange(2, 4))
    assert torch.allclose(full[0][2:4], part[0], atol=1e-6)


def test_render_image_shape_and_determinism(tiny_scene):
    field = small_field()
    fr = tiny_scene.frames[0]
    out1 = render_image(fr.pose, field, 0, 0, tiny_scene.intrinsics, (16, 24), jitter_seed=3)
    out2 = render_image(fr.pose, field, 0, 0, tiny_scene.intrinsics, (16, 24), jitter_seed=3)
    assert out1.color.shape == (16, 24, 3)
    assert out1.depth.shape == (16, 24)
    assert np.array_equal(out1.color, out2.color)
    assert np.array_equal(out1.depth, out2.depth)


def test_render_image_requires_geometry():
    field = small_field()
    from stylefield.cameras import CameraPose

    with pytest.raises(ValidationError):
        render_image(CameraPose(0, 0, 1.3), field, 0, 0, None, (8, 8))
