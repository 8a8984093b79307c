"""Original-scene fitting: minimize squared color error of sampled rays
against ground-truth pixels under the original-scene conditioning."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from stylefield.cameras import pixel_rays
from stylefield.errors import DivergenceError, ValidationError
from stylefield.field.network import ConditionedField, FieldConfig
from stylefield.field.render import render_image, render_rays
from stylefield.seeding import derive_seed, generator, init_module


@dataclass(frozen=True)
class TrainFieldConfig:
    iterations: int = 10_000
    rays_per_step: int = 176
    lr: float = 2e-3
    holdout_every: int = 12  # every k-th frame is held out of training
    log_every: int = 50


class RayBank:
    """Flattened (origin, direction, color) table over a dataset's frames."""

    def __init__(self, dataset, frame_indices=None):
        frames = dataset.frames
        idx = list(range(len(frames))) if frame_indices is None else list(frame_indices)
        if not idx:
            raise ValidationError("no frames selected")
        origins, dirs, colors, near, far = [], [], [], [], []
        h, w = dataset.resolution
        for i in idx:
            fr = frames[i]
            o, d = pixel_rays(fr.pose, dataset.intrinsics, h, w)
            origins.append(o)
            dirs.append(d)
            colors.append(fr.image.reshape(-1, 3))
            near.append(np.full(h * w, fr.pose.radius))
            far.append(np.full(h * w, fr.pose.radius))
        self.origins = torch.from_numpy(np.concatenate(origins)).float()
        self.dirs = torch.from_numpy(np.concatenate(dirs)).float()
        self.colors = torch.from_numpy(np.concatenate(colors)).float()
        self.radii = torch.from_numpy(np.concatenate(near)).float()
        if float(self.radii.max() - self.radii.min()) > 1e-9:
            raise ValidationError("ray bank requires a single orbit radius per dataset")
        self.count = self.origins.shape[0]


def split_holdout(n_frames: int, holdout_every: int) -> tuple[list[int], list[int]]:
    if holdout_every <= 0:
        return list(range(n_frames)), []
    held = [i for i in range(n_frames) if i % holdout_every == holdout_every - 1]
    train = [i for i in range(n_frames) if i not in held]
    if not train:
        raise ValidationError("holdout schedule leaves no training frames")
    return train, held


def train_original(
    dataset,
    config: TrainFieldConfig | None = None,
    field_config: FieldConfig | None = None,
    seed: int = 0,
    progress=None,
):
    """Fit the field to the original scene (style 0, appearance 0).

    Returns (field, trace) where trace is a list of (iteration, loss).
    Raises DivergenceError with the iteration and learning rate if the loss
    goes non-finite.
    """
    cfg = config or TrainFieldConfig()
    if cfg.iterations < 1:
        raise ValidationError("iteration count must be >= 1")
    dataset.validate()
    field = ConditionedField(field_config or FieldConfig())
    init_module(field, derive_seed(seed, "field-init"))

    train_idx, _ = split_holdout(len(dataset.frames), cfg.holdout_every)
    bank = RayBank(dataset, train_idx)
    fcfg = field.config
    opt = torch.optim.Adam(field.parameters(), lr=cfg.lr)
    gen = generator(seed, "ray-sampling")
    trace = []
    t0 = time.time()
    for it in range(cfg.iterations):
        sel = torch.randint(0, bank.count, (cfg.rays_per_step,), generator=gen)
        radius = float(bank.radii[sel[0]])
        color, _, _, _ = render_rays(
            field,
            bank.origins[sel],
            bank.dirs[sel],
            radius + fcfg.near_offset,
            radius + fcfg.far_offset,
            style_id=0,
            app_index=0,
            jitter_seed=derive_seed(seed, "jitter", it),
            ray_ids=sel,
        )
        loss = ((color - bank.colors[sel]) ** 2).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at iteration {it}", iteration=it, lr=cfg.lr
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss.item()))
            if progress is not None:
                progress(it, float(loss))
    elapsed = time.time() - t0
    field.train_seconds = elapsed
    field.ms_per_step = elapsed / cfg.iterations * 1000.0
    return field, trace


def holdout_psnr(dataset, field, config: TrainFieldConfig | None = None, seed: int = 0) -> float:
    """Mean PSNR over held-out frames (99 dB cap per frame)."""
    cfg = config or TrainFieldConfig()
    _, held = split_holdout(len(dataset.frames), cfg.holdout_every)
    if not held:
        raise ValidationError("no held-out frames under this schedule")
    vals = []
    for i in held:
        fr = dataset.frames[i]
        out = render_image(
            fr.pose,
            field,
            style_id=0,
            app_index=0,
            intrinsics=dataset.intrinsics,
            resolution=dataset.resolution,
            jitter_seed=derive_seed(seed, "eval-jitter", i),
        )
        mse = float(np.mean((out.color - fr.image) ** 2))
        vals.append(99.0 if mse == 0 else min(99.0, 10.0 * math.log10(1.0 / mse)))
    return float(np.mean(vals))
