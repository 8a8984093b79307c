"""View-consistent stylization of the field.

Partitions poses into the generator's training cone and its complement,
assembles the guide union from the adjustor (in-cone) and mapper (out-cone)
paths, and finetunes the conditioned field under masked losses: foreground
color toward the guides under the stylized branch, background and
original-branch densities pinned to a frozen pre-finetune snapshot, plus a
depth smoothness term on rendered patches.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from stylefield.adjustor import AdjustorParams, build_in_domain_set
from stylefield.cameras import CameraPose, pixel_rays
from stylefield.errors import DivergenceError, ValidationError
from stylefield.field.render import render_image, render_rays
from stylefield.mapper import HiddenMapper, build_out_domain_set
from stylefield.seeding import derive_seed, generator
from stylefield.sets import DOMAIN_IN, StylizedSet
from stylefield.stylegen.generator import LatentCode, ToyGenerator

MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class ViewDomain:
    """In-cone bounds; boundary poses classify as in-domain."""

    theta_max: float = math.radians(40.0)
    phi_max: float = math.radians(20.0)

    def contains_angles(self, theta: float, phi: float) -> bool:
        if not (math.isfinite(theta) and math.isfinite(phi)):
            raise ValidationError("pose angles must be finite")
        return abs(theta) <= self.theta_max and abs(phi) <= self.phi_max

    def contains(self, pose: CameraPose) -> bool:
        return self.contains_angles(pose.theta, pose.phi)


def partition_views(poses, domain: ViewDomain):
    """Disjoint, exhaustive (in, out) split of a pose list."""
    inside = [p for p in poses if domain.contains(p)]
    outside = [p for p in poses if not domain.contains(p)]
    return inside, outside


def masked_losses(
    pred_color: torch.Tensor,
    guide_color: torch.Tensor,
    pred_sigma_style: torch.Tensor,
    pred_sigma_orig: torch.Tensor,
    snap_sigma: torch.Tensor,
    mask: torch.Tensor,
):
    """(L_style, L_br, L_ori) as plain sums over the supplied rays.

    pred_color/guide_color are (R, 3); the sigma tensors are (R, S)
    per-sample densities on matched rays; mask is the per-ray foreground
    indicator of the guide entry. The snapshot densities come from the frozen
    pre-finetune field evaluated on the fly.
    """
    if pred_color.shape != guide_color.shape:
        raise ValidationError("color shapes disagree")
    if pred_sigma_style.shape != snap_sigma.shape or pred_sigma_orig.shape != snap_sigma.shape:
        raise ValidationError("sigma shapes disagree")
    m = mask.to(pred_color.dtype)
    style = (((pred_color - guide_color) * m[:, None]) ** 2).sum()
    br = (((pred_sigma_style - snap_sigma) * (1.0 - m)[:, None]) ** 2).sum()
    ori = ((pred_sigma_orig - snap_sigma) ** 2).sum()
    return style, br, ori


def depth_loss(depth: torch.Tensor) -> torch.Tensor:
    """Squared differences of horizontal and vertical neighbors, summed."""
    if not torch.isfinite(depth).all():
        raise ValidationError("depth map contains non-finite values")
    dh = depth[:, :-1] - depth[:, 1:]
    dv = depth[:-1, :] - depth[1:, :]
    return (dh**2).sum() + (dv**2).sum()


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 2500
    rays_per_step: int = 160
    patch: int = 16
    lr: float = 1e-3
    lambda_depth: float = 0.01
    disable_style: bool = False
    disable_br: bool = False
    disable_ori: bool = False
    disable_depth: bool = False
    log_every: int = 25


def snapshot_field(field):
    snap = copy.deepcopy(field)
    snap.eval()
    for p in snap.parameters():
        p.requires_grad_(False)
    return snap


def finetune(
    field,
    stylized: StylizedSet,
    ori_dataset,
    config: FinetuneConfig | None = None,
    seed: int = 0,
    progress=None,
):
    """Adapt the field to the guide union under the masked losses.

    Stylized entries train the style branch (style id 1, per-entry appearance
    row); the original branch (style id 0) and background densities are held
    to the frozen snapshot. The logged total equals the sum of the logged
    weighted components exactly. Returns (field, snapshot, trace); trace rows
    are (iteration, style, br, ori, depth, total).
    """
    cfg = config or FinetuneConfig()
    stylized.validate(require_masks=True)
    if not stylized.entries:
        raise ValidationError("stylized set is empty")
    max_app = max(e.appearance for e in stylized.entries)
    if max_app >= field.config.n_appearances:
        raise ValidationError(
            f"appearance index {max_app} exceeds the field's table ({field.config.n_appearances})"
        )
    snap = snapshot_field(field)
    fcfg = field.config
    h, w = stylized.resolution
    opt = torch.optim.Adam(field.parameters(), lr=cfg.lr)
    rng = generator(seed, "finetune")

    rays_cache = {}

    def entry_rays(i):
        if i not in rays_cache:
            e = stylized.entries[i]
            o, d = pixel_rays(e.pose, stylized.intrinsics, h, w)
            rays_cache[i] = (
                torch.from_numpy(o).float(),
                torch.from_numpy(d).float(),
                torch.from_numpy(e.image.reshape(-1, 3).copy()).float(),
                torch.from_numpy(e.mask.reshape(-1).copy()),
            )
        return rays_cache[i]

    trace = []
    for it in range(cfg.iterations):
        ei = int(torch.randint(0, len(stylized.entries), (1,), generator=rng))
        entry = stylized.entries[ei]
        origins, dirs, colors, mask = entry_rays(ei)
        sel = torch.randint(0, h * w, (cfg.rays_per_step,), generator=rng)
        near = entry.pose.radius + fcfg.near_offset
        far = entry.pose.radius + fcfg.far_offset
        jseed = derive_seed(seed, "ft-jitter", it)

        pred_color, _, _, _, sig_style = render_rays(
            field, origins[sel], dirs[sel], near, far, 1, entry.appearance,
            jitter_seed=jseed, ray_ids=sel, return_sigmas=True,
        )
        _, _, _, _, sig_orig = render_rays(
            field, origins[sel], dirs[sel], near, far, 0, 0,
            jitter_seed=jseed, ray_ids=sel, return_sigmas=True,
        )
        with torch.no_grad():
            _, _, _, _, sig_snap = render_rays(
                snap, origins[sel], dirs[sel], near, far, 0, 0,
                jitter_seed=jseed, ray_ids=sel, return_sigmas=True,
            )
        style_sum, br_sum, ori_sum = masked_losses(
            pred_color, colors[sel], sig_style, sig_orig, sig_snap, mask[sel]
        )
        n_r = cfg.rays_per_step
        n_s = fcfg.n_samples
        style_term = style_sum / n_r
        br_term = br_sum / (n_r * n_s)
        ori_term = ori_sum / (n_r * n_s)

        if cfg.disable_depth or cfg.patch <= 1:
            depth_term = torch.zeros(())
        else:
            py = int(torch.randint(0, h - cfg.patch + 1, (1,), generator=rng))
            px = int(torch.randint(0, w - cfg.patch + 1, (1,), generator=rng))
            rows = torch.arange(py, py + cfg.patch)[:, None] * w + torch.arange(px, px + cfg.patch)[None, :]
            rows = rows.reshape(-1)
            _, pdepth, _, _ = render_rays(
                field, origins[rows], dirs[rows], near, far, 1, entry.appearance,
                jitter_seed=jseed, ray_ids=rows,
            )
            depth_term = depth_loss(pdepth.view(cfg.patch, cfg.patch)) / (
                2 * cfg.patch * (cfg.patch - 1)
            )

        zero = torch.zeros(())
        style_log = zero if cfg.disable_style else style_term
        br_log = zero if cfg.disable_br else br_term
        ori_log = zero if cfg.disable_ori else ori_term
        depth_log = zero if cfg.disable_depth else cfg.lambda_depth * depth_term
        total = style_log + br_log + ori_log + depth_log
        if not torch.isfinite(total):
            raise DivergenceError(
                f"non-finite finetune loss at iteration {it}: "
                f"style={style_log.item():.4g} br={br_log.item():.4g} "
                f"ori={ori_log.item():.4g} depth={depth_log.item():.4g}",
                iteration=it,
                lr=cfg.lr,
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            row = (it, style_log.item(), br_log.item(), ori_log.item(),
                   depth_log.item(), total.item())
            trace.append(row)
            if progress is not None:
                progress(it, row)
    return field, snap, trace


def field_mask(field, pose, intrinsics, resolution, jitter_seed: int = 0) -> np.ndarray:
    """Foreground mask for a guide image: the field's own rendered opacity at
    the same pose, thresholded. Keeps mask geometry consistent across the
    guide set without a matting model."""
    out = render_image(
        pose, field, style_id=0, app_index=0, intrinsics=intrinsics,
        resolution=resolution, jitter_seed=jitter_seed,
    )
    return out.opacity >= MASK_THRESHOLD


def assemble_sets(
    field,
    adjustor_params: AdjustorParams,
    mapper: HiddenMapper,
    gen: ToyGenerator,
    code_styled: LatentCode,
    pose_grid,
    domain: ViewDomain,
    intrinsics,
    resolution,
    stage: int | None = None,
    jitter_seed: int = 0,
    mapper_gen: ToyGenerator | None = None,
) -> StylizedSet:
    """Partition the grid, run both guide paths, attach field-derived masks,
    and merge with unique appearance indices (in-domain first).

    The adjustor path uses `gen` (typically the pivot-tuned copy); the mapper
    path uses `mapper_gen`, the generator the mapper was trained against
    (defaults to `gen`)."""
    poses_in, poses_out = partition_views(pose_grid, domain)
    warnings = []
    if not poses_in:
        warnings.append("empty in-domain partition")
    if not poses_out:
        warnings.append("empty out-of-domain partition")
    parts = []
    if poses_in:
        parts.append(
            build_in_domain_set(
                code_styled, poses_in, adjustor_params, gen, domain, intrinsics,
                resolution, appearance_start=0,
            )
        )
    if poses_out:
        parts.append(
            build_out_domain_set(
                field, poses_out, code_styled, mapper, mapper_gen or gen, domain,
                intrinsics, resolution, stage=stage, appearance_start=len(poses_in),
                jitter_seed=jitter_seed,
            )
        )
    merged = parts[0]
    for extra in parts[1:]:
        merged = merged.merged_with(extra)
    for e in merged.entries:
        e.mask = field_mask(field, e.pose, intrinsics, resolution, jitter_seed)
    merged = StylizedSet(
        entries=merged.entries,
        resolution=merged.resolution,
        intrinsics=merged.intrinsics,
        seed=merged.seed,
        warnings=tuple(warnings),
    )
    merged.validate(domain=domain, require_masks=True)
    return merged
