"""Hidden-feature mapper: maps images into the generator's stage activation
space so style mixing can be applied to views the generator never saw.

Trained self-supervised on generated pairs only: for codes (a, b) and a
sampled warp,

    F_a   = warp(geo_prefix(a))          # target hidden map
    F_hat = mapper(warp(image_of_a))     # predicted hidden map
    loss  = L1(mix(F_a, b), mix(F_hat, b)) + L1(F_a, F_hat)

Both terms matter: the image term alone admits degenerate maps that only
reproduce the mixed image, the hidden term pins the representation itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.augment import AugmentSpec, augment, sample_augment
from stylefield.errors import DivergenceError, ValidationError
from stylefield.seeding import derive_seed, generator, init_module
from stylefield.sets import DOMAIN_OUT, StylizedEntry, StylizedSet
from stylefield.stylegen.generator import (
    GeneratorConfig,
    HiddenFeatureMap,
    LatentCode,
    ToyGenerator,
    generate_geo,
    generate_style,
)


@dataclass(frozen=True)
class TrainMapperConfig:
    iterations: int = 20_000
    batch: int = 2
    lr: float = 5e-4
    log_every: int = 100
    holdout: int = 16  # held-out (a, b, warp) triples for progress checks


class HiddenMapper(nn.Module):
    """Shared convolutional trunk with one head per exposed stage."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        self.trunk1 = nn.Conv2d(3, 24, 3, stride=2, padding=1)   # 32x32
        self.trunk2 = nn.Conv2d(24, 48, 3, stride=2, padding=1)  # 16x16
        self.trunk3 = nn.Conv2d(48, 64, 3, stride=2, padding=1)  # 8x8
        heads = {}
        feat_ch = {cfg.resolution // 2: 24, cfg.resolution // 4: 48, cfg.resolution // 8: 64}
        for stage in cfg.exposed_stages:
            res = cfg.stage_resolution(stage)
            if res not in feat_ch:
                raise ValidationError(f"stage {stage} resolution {res} has no trunk level")
            heads[str(stage)] = nn.Conv2d(feat_ch[res], cfg.stage_channels(stage), 3, padding=1)
        self.heads = nn.ModuleDict(heads)

    def forward(self, images: torch.Tensor, stage: int) -> torch.Tensor:
        if str(stage) not in self.heads:
            raise ValidationError(f"unsupported stage {stage}; exposed: {self.config.exposed_stages}")
        x1 = F.leaky_relu(self.trunk1(images), 0.2)
        x2 = F.leaky_relu(self.trunk2(x1), 0.2)
        x3 = F.leaky_relu(self.trunk3(x2), 0.2)
        res = self.config.stage_resolution(stage)
        feat = {self.config.resolution // 2: x1, self.config.resolution // 4: x2,
                self.config.resolution // 8: x3}[res]
        return self.heads[str(stage)](feat)


def map_hidden(image, mapper: HiddenMapper, stage: int) -> HiddenFeatureMap:
    """Image (3, R, R) tensor or (R, R, 3) array -> tagged hidden map."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    res = mapper.config.resolution
    if image.shape != (3, res, res):
        raise ValidationError(f"image shape {tuple(image.shape)} != (3, {res}, {res})")
    with torch.no_grad():
        out = mapper(image[None], stage)[0]
    return HiddenFeatureMap(tensor=out, stage=stage)


def mapper_step(
    gen: ToyGenerator,
    mapper: HiddenMapper,
    image_a: torch.Tensor,
    code_a: LatentCode,
    code_b: LatentCode,
    spec: AugmentSpec,
    stage: int | None = None,
    predicted_map: HiddenFeatureMap | None = None,
) -> torch.Tensor:
    """Self-supervised loss for one (a, b, warp) triple; differentiable in the
    mapper (generator and targets are held fixed). predicted_map substitutes
    an oracle prediction for the mapper's, for testing."""
    stage = stage if stage is not None else gen.config.split_stage
    with torch.no_grad():
        f_a = augment(generate_geo(gen, code_a, stage), spec)
        i_mix = generate_style(gen, f_a, code_b)
    if predicted_map is None:
        pred = mapper(augment(image_a, spec)[None], stage)[0]
        f_hat = HiddenFeatureMap(tensor=pred, stage=stage)
    else:
        f_hat = predicted_map
    i_hat = generate_style(gen, f_hat, code_b)
    return (i_mix - i_hat).abs().mean() + (f_a.tensor - f_hat.tensor).abs().mean()


def _sample_triple(gen: ToyGenerator, seed: int, index: int):
    gcfg = gen.config
    rng = generator(seed, "mapper-triple", index)
    z = torch.randn(2, gcfg.latent_dim, generator=rng)
    with torch.no_grad():
        w = gen.mapping(z)
        img_a = gen.synthesis(w[0:1, None, :].expand(-1, gcfg.stages, -1))[0]
    code_a = gen.broadcast(w[0])
    code_b = gen.broadcast(w[1])
    spec = sample_augment(derive_seed(seed, "mapper-aug"), index)
    stage_pick = int(torch.randint(0, len(gcfg.exposed_stages), (1,), generator=rng))
    return img_a, code_a, code_b, spec, gcfg.exposed_stages[stage_pick]


def heldout_loss(gen, mapper, seed: int, count: int) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(count):
            img_a, code_a, code_b, spec, stage = _sample_triple(gen, derive_seed(seed, "held"), i)
            total += float(mapper_step(gen, mapper, img_a, code_a, code_b, spec, stage))
    return total / count


def train_mapper(
    gen: ToyGenerator, config: TrainMapperConfig | None = None, seed: int = 0, progress=None
):
    """One mapper per generator; serves every scene afterwards.

    Returns (mapper, trace, held) where trace rows are (iteration, loss) and
    held rows are (iteration, held-out loss).
    """
    cfg = config or TrainMapperConfig()
    mapper = HiddenMapper(gen.config)
    init_module(mapper, derive_seed(seed, "mapper-init"))
    opt = torch.optim.Adam(mapper.parameters(), lr=cfg.lr)
    trace, held = [], []
    held.append((0, heldout_loss(gen, mapper, seed, cfg.holdout)))
    for it in range(cfg.iterations):
        losses = []
        for b in range(cfg.batch):
            img_a, code_a, code_b, spec, stage = _sample_triple(gen, seed, it * cfg.batch + b)
            losses.append(mapper_step(gen, mapper, img_a, code_a, code_b, spec, stage))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite mapper loss at iteration {it}", iteration=it, lr=cfg.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss.item()))
            if progress is not None:
                progress(it, loss.item())
    held.append((cfg.iterations, heldout_loss(gen, mapper, seed, cfg.holdout)))
    return mapper, trace, held


def build_out_domain_set(
    field,
    poses_out,
    code_styled: LatentCode,
    mapper: HiddenMapper,
    gen: ToyGenerator,
    domain,
    intrinsics,
    resolution,
    stage: int | None = None,
    appearance_start: int = 0,
    jitter_seed: int = 0,
) -> StylizedSet:
    """Render unedited views from the field, map each into the hidden space,
    and restyle with the edited code's style suffix. Appearance indices
    continue from appearance_start."""
    from stylefield.field.render import render_image  # local import, avoids cycle

    stage = stage if stage is not None else gen.config.split_stage
    entries = []
    for i, pose in enumerate(poses_out):
        if domain.contains(pose):
            raise ValidationError(
                f"pose ({pose.theta:.3f}, {pose.phi:.3f}) is in-domain; it belongs to the adjustor path"
            )
        out = render_image(
            pose, field, style_id=0, app_index=0, intrinsics=intrinsics,
            resolution=resolution, jitter_seed=jitter_seed,
        )
        fmap = map_hidden(out.color, mapper, stage)
        with torch.no_grad():
            styled = generate_style(gen, fmap, code_styled)
        entries.append(
            StylizedEntry(
                image=styled.permute(1, 2, 0).numpy().astype(np.float32),
                pose=pose,
                appearance=appearance_start + i,
                domain=DOMAIN_OUT,
            )
        )
    s = StylizedSet(entries=entries, resolution=resolution, intrinsics=intrinsics)
    s.validate(require_masks=False)
    return s
