"""Volume rendering: stratified sampling, transmittance compositing, and
full-image rendering through the shared pinhole model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from stylefield.cameras import CameraPose, Intrinsics, pixel_rays
from stylefield.errors import ValidationError
from stylefield.seeding import hash_uniform

OPACITY_EPS = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) scene units
    opacity: np.ndarray  # (H, W) in [0, 1]
    weights: np.ndarray | None = None  # (H*W, n_samples) if retained


def composite_weights(sigmas: torch.Tensor, deltas: torch.Tensor):
    """Per-sample weights w_i = T_i (1 - exp(-sigma_i delta_i)) with
    T_i the product of preceding survival factors. Returns (weights, trans)."""
    tau = sigmas * deltas
    surv = torch.exp(-tau)
    trans = torch.cumprod(torch.cat([torch.ones_like(surv[:, :1]), surv[:, :-1]], dim=-1), dim=-1)
    return trans * (1.0 - surv), trans


def composite(sigmas: torch.Tensor, colors: torch.Tensor, t_vals: torch.Tensor, far: float):
    """Discrete transmittance compositing along each ray.

    sigmas (R, S), colors (R, S, 3), t_vals (R, S) ascending sample
    distances; the last interval extends to the far plane. Returns
    (color (R, 3), depth (R,), opacity (R,), weights (R, S)).
    """
    deltas = torch.cat([t_vals[:, 1:] - t_vals[:, :-1], far - t_vals[:, -1:]], dim=-1)
    weights, _ = composite_weights(sigmas, deltas)
    color = (weights[..., None] * colors).sum(dim=1)
    opacity = weights.sum(dim=1)
    avg = (weights * t_vals).sum(dim=1) / opacity.clamp(min=OPACITY_EPS)
    depth = torch.where(opacity < OPACITY_EPS, torch.full_like(avg, far), avg)
    return color, depth, opacity, weights


def stratified_ts(
    n_rays: int, n_samples: int, near: float, far: float, seed: int, ray_ids: torch.Tensor | None = None
) -> torch.Tensor:
    """Jittered sample distances; jitter is a pure hash of (seed, ray id,
    sample index) so results do not depend on batch composition."""
    if n_samples < 2:
        raise ValidationError("need at least 2 samples per ray")
    if not (near < far):
        raise ValidationError(f"degenerate interval near={near} far={far}")
    if ray_ids is None:
        ray_ids = torch.arange(n_rays, dtype=torch.int64)
    idx = ray_ids[:, None] * n_samples + torch.arange(n_samples, dtype=torch.int64)[None, :]
    u = hash_uniform(seed, idx)
    bins = torch.arange(n_samples, dtype=torch.float64)[None, :]
    return (near + (bins + u) * (far - near) / n_samples).to(torch.float32)


def render_rays(
    field,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: float,
    far: float,
    style_id: int,
    app_index: int,
    n_samples: int | None = None,
    jitter_seed: int = 0,
    ray_ids: torch.Tensor | None = None,
    return_sigmas: bool = False,
):
    """Evaluate the field along stratified samples and composite.

    origins/dirs are (R, 3) world-space tensors (dirs unit length). Returns
    (color (R,3), depth (R,), opacity (R,), weights (R,S)[, sigmas (R,S)]).
    """
    cfg = field.config
    n_samples = n_samples or cfg.n_samples
    t_vals = stratified_ts(origins.shape[0], n_samples, near, far, jitter_seed, ray_ids)
    t_vals = t_vals.to(origins.dtype)
    pts = origins[:, None, :] + dirs[:, None, :] * t_vals[..., None]
    flat_pts = field.normalize_points(pts.reshape(-1, 3))
    flat_dirs = dirs[:, None, :].expand(-1, n_samples, -1).reshape(-1, 3)
    cond = field.conditioning(style_id, app_index)
    sigma, f_geo = field.density(flat_pts, cond)
    c = field.color(flat_dirs, f_geo, cond)
    sigmas = sigma.view(-1, n_samples)
    colors = c.view(-1, n_samples, 3)
    color, depth, opacity, weights = composite(sigmas, colors, t_vals, far)
    if return_sigmas:
        return color, depth, opacity, weights, sigmas
    return color, depth, opacity, weights


def render_image(
    pose: CameraPose,
    field,
    style_id: int = 0,
    app_index: int = 0,
    intrinsics: Intrinsics | None = None,
    resolution: tuple[int, int] | None = None,
    jitter_seed: int = 0,
    keep_weights: bool = False,
    chunk: int = 4096,
) -> RenderOutput:
    cfg = field.config
    if resolution is None or intrinsics is None:
        raise ValidationError("render_image needs explicit intrinsics and resolution")
    h, w = resolution
    if h <= 0 or w <= 0:
        raise ValidationError("resolution must be positive")
    origins_np, dirs_np = pixel_rays(pose, intrinsics, h, w)
    origins = torch.from_numpy(origins_np).float()
    dirs = torch.from_numpy(dirs_np).float()
    near, far = pose.radius + cfg.near_offset, pose.radius + cfg.far_offset
    colors, depths, opacities, weight_rows = [], [], [], []
    with torch.no_grad():
        for start in range(0, h * w, chunk):
            sl = slice(start, min(start + chunk, h * w))
            ray_ids = torch.arange(sl.start, sl.stop, dtype=torch.int64)
            color, depth, opacity, weights = render_rays(
                field,
                origins[sl],
                dirs[sl],
                near,
                far,
                style_id,
                app_index,
                jitter_seed=jitter_seed,
                ray_ids=ray_ids,
            )
            colors.append(color)
            depths.append(depth)
            opacities.append(opacity)
            if keep_weights:
                weight_rows.append(weights)
    out = RenderOutput(
        color=torch.cat(colors).view(h, w, 3).numpy(),
        depth=torch.cat(depths).view(h, w).numpy(),
        opacity=torch.cat(opacities).view(h, w).numpy(),
        weights=torch.cat(weight_rows).numpy() if keep_weights else None,
    )
    return out
