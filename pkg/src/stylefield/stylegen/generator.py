"""Toy style-based generator.

A mapping MLP turns normal draws into latent codes; synthesis starts from a
learned constant and runs S upsampling conv stages, each modulated by its
stage's latent vector through adaptive instance normalization. The activation
tensor passed between stages is the hidden feature map; splitting the stage
sequence at index s gives the geometric prefix (stages 1..s) and the style
suffix (stages s+1..S).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.errors import ValidationError


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 32
    stages: int = 5
    channels: tuple[int, ...] = (128, 128, 64, 32, 16)
    base_res: int = 4
    split_stage: int = 3
    exposed_stages: tuple[int, ...] = (2, 3, 4)
    mapping_layers: int = 3
    mapping_hidden: int = 64

    def __post_init__(self):
        if len(self.channels) != self.stages:
            raise ValidationError("channel schedule length must equal stage count")
        if not (1 <= self.split_stage < self.stages):
            raise ValidationError("split stage must lie in 1..stages-1")

    @property
    def resolution(self) -> int:
        return self.base_res * 2 ** (self.stages - 1)

    def stage_resolution(self, stage: int) -> int:
        return self.base_res * 2 ** (stage - 1)

    def stage_channels(self, stage: int) -> int:
        return self.channels[stage - 1]


@dataclass
class LatentCode:
    """One latent vector per generator stage, shape (S, D). Mapping broadcasts
    a single vector; per-stage divergence only arises from editing/mixing."""

    stages: torch.Tensor

    def __post_init__(self):
        if self.stages.ndim != 2:
            raise ValidationError("latent code must be (stages, dim)")

    @property
    def n_stages(self) -> int:
        return self.stages.shape[0]

    @property
    def dim(self) -> int:
        return self.stages.shape[1]

    def geo(self, split: int) -> torch.Tensor:
        return self.stages[:split]

    def style(self, split: int) -> torch.Tensor:
        return self.stages[split:]

    def replaced_style(self, other: "LatentCode", split: int) -> "LatentCode":
        return LatentCode(torch.cat([self.stages[:split], other.stages[split:]], dim=0))

    def shifted(self, delta: torch.Tensor) -> "LatentCode":
        """Add the same D-vector to every stage."""
        return LatentCode(self.stages + delta[None, :])

    def detached(self) -> "LatentCode":
        return LatentCode(self.stages.detach().clone())


@dataclass
class HiddenFeatureMap:
    """Stage activation tensor (C, H, W) tagged with its stage index."""

    tensor: torch.Tensor
    stage: int

    def __post_init__(self):
        if self.tensor.ndim != 3:
            raise ValidationError("hidden map must be (C, H, W)")


class MappingNetwork(nn.Module):
    """MLP from normal draws to latent codes.

    A learnable per-dimension output gain starts at a geometric decay so the
    latent covariance has a cleanly separated, fast-decaying spectrum from
    the start (as in large pretrained style spaces); training is free to
    reshape it. A fixed, geometrically graded noise bypass keeps every
    latent direction alive regardless of where training pushes the gains:
    the covariance must stay full rank for the decomposition, and the floor
    spectrum itself must stay gap-separated so the eigensolver converges
    even where the learned variance has collapsed."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.in_dim = config.latent_dim
        dims = [config.latent_dim] + [config.mapping_hidden] * (config.mapping_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1] if i + 1 < len(dims) else config.latent_dim)
            for i in range(len(dims))
        )
        self.out_gain = nn.Parameter(0.9 ** torch.arange(config.latent_dim, dtype=torch.float32))
        idx = torch.arange(config.latent_dim, dtype=torch.float32)
        self.register_buffer("noise_bypass", 0.08 * 0.85**idx + 0.02, persistent=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        zn = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        x = zn
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = F.leaky_relu(x, 0.2)
        return x * self.out_gain + self.noise_bypass * zn


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, latent_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = nn.Linear(latent_dim, 2 * out_ch)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        mu = x.mean(dim=(2, 3), keepdim=True)
        sd = x.std(dim=(2, 3), keepdim=True) + 1e-6
        scale, shift = self.affine(w).chunk(2, dim=-1)
        x = (x - mu) / sd * (1.0 + scale[..., None, None]) + shift[..., None, None]
        return F.leaky_relu(x, 0.2)


class SynthesisNetwork(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.const = nn.Parameter(torch.randn(1, config.channels[0], config.base_res, config.base_res))
        self._param_inits = {"const": ("normal", 0.0, 1.0)}
        stages = []
        prev = config.channels[0]
        for s in range(config.stages):
            stages.append(_Stage(prev, config.channels[s], config.latent_dim, upsample=s > 0))
            prev = config.channels[s]
        self.stage_blocks = nn.ModuleList(stages)
        self.to_rgb = nn.Conv2d(config.channels[-1], 3, 1)

    def run_stages(self, x: torch.Tensor | None, w_stages: torch.Tensor, start: int, stop: int):
        """Apply stages start..stop (1-based, inclusive). x is None when
        starting from the learned constant. w_stages is (B, S, D)."""
        if start == 1:
            x = self.const.expand(w_stages.shape[0], -1, -1, -1)
        for s in range(start, stop + 1):
            x = self.stage_blocks[s - 1](x, w_stages[:, s - 1])
        return x

    def forward(self, w_stages: torch.Tensor) -> torch.Tensor:
        x = self.run_stages(None, w_stages, 1, self.config.stages)
        return torch.sigmoid(self.to_rgb(x))


class ToyGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        self.mapping = MappingNetwork(self.config)
        self.synthesis = SynthesisNetwork(self.config)

    def broadcast(self, w: torch.Tensor) -> LatentCode:
        return LatentCode(w[None, :].expand(self.config.stages, -1).clone())

    def forward_code(self, code: LatentCode) -> torch.Tensor:
        """Full synthesis of one code; returns (3, R, R) in [0, 1]."""
        return self.synthesis(code.stages[None])[0]

    def sample_images(self, z: torch.Tensor) -> torch.Tensor:
        """Batched z -> images; broadcast mapping output to all stages."""
        w = self.mapping(z)
        w_stages = w[:, None, :].expand(-1, self.config.stages, -1)
        return self.synthesis(w_stages)


def map_latent(gen: ToyGenerator, z: torch.Tensor) -> LatentCode:
    if not torch.isfinite(z).all():
        raise ValidationError("non-finite latent input")
    w = gen.mapping(z[None])[0]
    return gen.broadcast(w)


def generate_geo(gen: ToyGenerator, code: LatentCode, split: int | None = None) -> HiddenFeatureMap:
    """Run the geometric prefix; returns the stage-split hidden map."""
    split = split if split is not None else gen.config.split_stage
    if not (1 <= split < gen.config.stages):
        raise ValidationError(f"split stage {split} outside 1..{gen.config.stages - 1}")
    w_stages = code.stages[None]
    x = gen.synthesis.run_stages(None, w_stages, 1, split)
    return HiddenFeatureMap(tensor=x[0], stage=split)


def generate_style(gen: ToyGenerator, fmap: HiddenFeatureMap, code: LatentCode) -> torch.Tensor:
    """Run the style suffix on a hidden map; only stages after fmap.stage of
    the code are read. Returns (3, R, R) in [0, 1]."""
    cfg = gen.config
    s = fmap.stage
    if not (1 <= s < cfg.stages):
        raise ValidationError(f"hidden map stage {s} outside 1..{cfg.stages - 1}")
    expect = (cfg.stage_channels(s), cfg.stage_resolution(s), cfg.stage_resolution(s))
    if tuple(fmap.tensor.shape) != expect:
        raise ValidationError(
            f"hidden map shape {tuple(fmap.tensor.shape)} does not match stage {s} {expect}"
        )
    x = gen.synthesis.run_stages(fmap.tensor[None], code.stages[None], s + 1, cfg.stages)
    return torch.sigmoid(gen.synthesis.to_rgb(x))[0]


def style_mix(gen: ToyGenerator, code_geo: LatentCode, code_style: LatentCode, split: int | None = None) -> torch.Tensor:
    """Geometry from code_geo's prefix, style from code_style's suffix."""
    split = split if split is not None else gen.config.split_stage
    return generate_style(gen, generate_geo(gen, code_geo, split), code_style)


def interpolate_codes(a: LatentCode, b: LatentCode, gamma: float) -> LatentCode:
    """Mixing-strength control: (1 - gamma) * a + gamma * b, per stage."""
    if a.stages.shape != b.stages.shape:
        raise ValidationError("codes must share (stages, dim)")
    if not (0.0 <= gamma <= 1.0):
        raise ValidationError(f"gamma {gamma} outside [0, 1]")
    return LatentCode((1.0 - gamma) * a.stages + gamma * b.stages)
