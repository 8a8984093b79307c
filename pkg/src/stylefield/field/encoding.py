"""Input encodings: multi-resolution hashed feature grids for positions and
a sin/cos frequency stack for view directions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from stylefield.errors import ValidationError

_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    min_res: int = 16
    max_res: int = 256

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.min_res]
        growth = (self.max_res / self.min_res) ** (1.0 / (self.levels - 1))
        return [int(math.floor(self.min_res * growth**lvl)) for lvl in range(self.levels)]


class HashGridEncoding(nn.Module):
    """Per level: spatial-hash the 8 cell corners, gather learned features,
    and blend them trilinearly; levels are concatenated."""

    def __init__(self, config: HashGridConfig):
        super().__init__()
        self.config = config
        self.tables = nn.Parameter(
            torch.empty(config.levels, config.table_size, config.features).uniform_(-1e-4, 1e-4)
        )
        self._param_inits = {"tables": ("uniform", -1e-4, 1e-4)}
        self.register_buffer(
            "res", torch.tensor(config.resolutions(), dtype=torch.float32), persistent=False
        )
        self._corner_tuples = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        self.register_buffer(
            "_level_offsets",
            (torch.arange(config.levels, dtype=torch.int64) * config.table_size)[None, :, None],
            persistent=False,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValidationError("non-finite coordinates passed to the hash grid")
        cfg = self.config
        n = x.shape[0]
        # (3, N, L) contiguous layouts keep the per-dimension elementwise ops
        # on the vectorized fast path.
        scaled = (x.T[:, :, None] * self.res.to(x.dtype)[None, None, :]).contiguous()
        cell = torch.floor(scaled)
        frac = scaled - cell
        cell = cell.to(torch.int64)
        # hash = (cx*p0) ^ (cy*p1) ^ (cz*p2); combine per-dimension components
        # for the two corner values of each axis instead of materializing an
        # (N, L, 8, 3) corner tensor.
        hx = (cell[0] * _PRIMES[0], (cell[0] + 1) * _PRIMES[0])
        hy = (cell[1] * _PRIMES[1], (cell[1] + 1) * _PRIMES[1])
        hz = (cell[2] * _PRIMES[2], (cell[2] + 1) * _PRIMES[2])
        corner_hashes = [hx[a] ^ hy[b] ^ hz[c] for a, b, c in self._corner_tuples]
        idx = torch.stack(corner_hashes, dim=2)  # (N, L, 8)
        power_of_two = cfg.table_size & (cfg.table_size - 1) == 0
        if power_of_two and bool(x.min() >= 0):
            idx = idx & (cfg.table_size - 1)  # non-negative hashes: mask == mod
        else:
            idx = torch.remainder(idx, cfg.table_size)
        idx = idx + self._level_offsets.to(idx.device)
        wx = (1.0 - frac[0], frac[0])
        wy = (1.0 - frac[1], frac[1])
        wz = (1.0 - frac[2], frac[2])
        w = torch.stack([wx[a] * wy[b] * wz[c] for a, b, c in self._corner_tuples], dim=2)
        flat = self.tables.reshape(cfg.levels * cfg.table_size, cfg.features).to(x.dtype)
        if torch.is_grad_enabled() and flat.requires_grad:
            # gather + weighted sum: backward is a plain index_put accumulate
            feats = flat[idx.reshape(-1)].view(n, cfg.levels, 8, cfg.features)
            out = (feats * w[..., None].to(x.dtype)).sum(dim=2)
        else:
            # inference: fused weighted gather-and-sum, no (N, L, 8, F) temp
            out = torch.nn.functional.embedding_bag(
                idx.reshape(n * cfg.levels, 8),
                flat,
                per_sample_weights=w.reshape(n * cfg.levels, 8).to(x.dtype),
                mode="sum",
            )
        return out.reshape(n, cfg.output_dim)


class DirectionalEncoding(nn.Module):
    """Frequency stack at 2^0 .. 2^(L-1): all sin blocks then all cos blocks,
    optionally prefixed by the raw direction."""

    def __init__(self, n_freqs: int = 4, include_input: bool = False):
        super().__init__()
        self.n_freqs = n_freqs
        self.include_input = include_input
        self.register_buffer(
            "freqs", 2.0 ** torch.arange(n_freqs, dtype=torch.float32), persistent=False
        )

    @property
    def output_dim(self) -> int:
        return 6 * self.n_freqs + (3 if self.include_input else 0)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        norms = v.norm(dim=-1)
        if (norms < 1e-8).any():
            raise ValidationError("zero direction vector")
        if (norms - 1.0).abs().max() > 1e-6:
            raise ValidationError("directions must be unit length within 1e-6")
        scaled = v[..., None, :] * self.freqs.to(v.dtype)[:, None]  # (..., L, 3)
        flat_sin = torch.sin(scaled).reshape(*v.shape[:-1], -1)
        flat_cos = torch.cos(scaled).reshape(*v.shape[:-1], -1)
        parts = [flat_sin, flat_cos]
        if self.include_input:
            parts.insert(0, v)
        return torch.cat(parts, dim=-1)
