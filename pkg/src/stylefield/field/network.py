"""The conditioned radiance field.

Two heads: a density net consuming (style embedding, appearance embedding,
hashed position features) -> (geometry feature, sigma >= 0), and a color net
consuming (style embedding, appearance embedding, encoded direction,
geometry feature) -> rgb in [0, 1]. Style/appearance enter each head's first
layer additively, so the per-image constants are folded into a bias once per
batch instead of being re-multiplied per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.errors import ValidationError
from stylefield.field.encoding import DirectionalEncoding, HashGridConfig, HashGridEncoding


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    n_styles: int = 2
    n_appearances: int = 40
    appearance_dim: int = 8  # width of the per-image code in [0, 1]
    embed_hidden: int = 16
    embed_dim: int = 16
    dir_freqs: int = 4
    include_raw_dir: bool = False
    geo_features: int = 15
    hidden: int = 64

    # scene geometry shared by synthesis and rendering
    scene_min: float = -0.5
    scene_size: float = 1.0
    near_offset: float = -0.45
    far_offset: float = 0.45
    n_samples: int = 64


class _EmbedMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.l1 = nn.Linear(in_dim, hidden)
        self.l2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.l2(F.relu(self.l1(x)))


class ConditionedField(nn.Module):
    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        cfg = config or FieldConfig()
        self.config = cfg
        self.grid = HashGridEncoding(cfg.grid)
        self.dir_enc = DirectionalEncoding(cfg.dir_freqs, cfg.include_raw_dir)

        self.style_table = nn.Parameter(torch.randn(cfg.n_styles, cfg.embed_hidden) * 0.1)
        self._param_inits = {"style_table": ("normal", 0.0, 0.1)}
        self.style_mlp = _EmbedMLP(cfg.embed_hidden, cfg.embed_hidden, cfg.embed_dim)
        # raw appearance parameters; sigmoid keeps beta inside [0, 1]^d
        self.appearance_raw = nn.Parameter(torch.zeros(cfg.n_appearances, cfg.appearance_dim))
        self.appearance_mlp = _EmbedMLP(cfg.appearance_dim, cfg.embed_hidden, cfg.embed_dim)

        h = cfg.hidden
        self.dens_in = nn.Linear(cfg.grid.output_dim, h)
        self.dens_cond = nn.Linear(2 * cfg.embed_dim, h, bias=False)
        self.dens_out = nn.Linear(h, 1 + cfg.geo_features)
        self.color_in = nn.Linear(self.dir_enc.output_dim + cfg.geo_features, h)
        self.color_cond = nn.Linear(2 * cfg.embed_dim, h, bias=False)
        self.color_out = nn.Linear(h, 3)

    def appearance_code(self, app_index: int) -> torch.Tensor:
        if not (0 <= app_index < self.config.n_appearances):
            raise ValidationError(
                f"appearance index {app_index} outside table of size {self.config.n_appearances}"
            )
        return torch.sigmoid(self.appearance_raw[app_index])

    def conditioning(self, style_id: int, app_index: int) -> torch.Tensor:
        """Concatenated (style, appearance) embedding, shape (2 * embed_dim,)."""
        if not (0 <= style_id < self.config.n_styles):
            raise ValidationError(f"style id {style_id} outside table of size {self.config.n_styles}")
        e_style = self.style_mlp(self.style_table[style_id])
        e_app = self.appearance_mlp(self.appearance_code(app_index))
        return torch.cat([e_style, e_app])

    def density(self, x: torch.Tensor, cond: torch.Tensor):
        """(sigma (N,), f_geo (N, G)) at normalized positions x in [0, 1]^3."""
        feats = self.grid(x)
        h = F.relu(self.dens_in(feats) + self.dens_cond(cond)[None, :])
        out = self.dens_out(h)
        return F.softplus(out[:, 0]), out[:, 1:]

    def color(self, v: torch.Tensor, f_geo: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        enc = self.dir_enc(v)
        h = F.relu(self.color_in(torch.cat([enc, f_geo], dim=-1)) + self.color_cond(cond)[None, :])
        return torch.sigmoid(self.color_out(h))

    def forward(self, x: torch.Tensor, v: torch.Tensor, style_id: int, app_index: int):
        """Full evaluation: returns (c (N, 3), sigma (N,), f_geo (N, G))."""
        cond = self.conditioning(style_id, app_index)
        sigma, f_geo = self.density(x, cond)
        c = self.color(v, f_geo, cond)
        return c, sigma, f_geo

    def normalize_points(self, pts: torch.Tensor) -> torch.Tensor:
        """World points -> [0, 1]^3 grid coordinates, clamped at the box."""
        cfg = self.config
        return ((pts - cfg.scene_min) / cfg.scene_size).clamp(0.0, 1.0)
