"""Adversarial training of the toy generator, self-supervised encoder
training, and pivot-locked generator finetuning."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.errors import DivergenceError, ValidationError
from stylefield.seeding import derive_seed, generator, init_module
from stylefield.stylegen.encoder import InversionEncoder, to_generator_tensor
from stylefield.stylegen.generator import GeneratorConfig, LatentCode, ToyGenerator


@dataclass(frozen=True)
class TrainGanConfig:
    iterations: int = 3000
    batch: int = 8
    lr: float = 1e-3
    r1_gamma: float = 1.0
    r1_every: int = 8
    collapse_floor: float = 0.01
    collapse_patience: int = 500
    log_every: int = 25
    pose_cone: tuple[float, float] = (math.radians(40.0), math.radians(20.0))


@dataclass(frozen=True)
class TrainEncoderConfig:
    iterations: int = 2500
    batch: int = 8
    lr: float = 1e-3
    refine_iterations: int = 300
    refine_batch: int = 2
    refine_lr: float = 5e-4
    log_every: int = 25


@dataclass(frozen=True)
class PivotalConfig:
    iterations: int = 300
    lr: float = 1e-3
    log_every: int = 25


class Discriminator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        chans = (24, 48, 64, 96)
        convs = []
        prev = 3
        for c in chans:
            convs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)
        feat_res = cfg.resolution // 2 ** len(chans)
        self.fc = nn.Linear(chans[-1] * feat_res * feat_res, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.fc(x.flatten(1))[:, 0]


def dataset_to_tensor(dataset) -> torch.Tensor:
    """(N, 3, H, W) float tensor of a dataset's frames."""
    stack = np.stack([fr.image.transpose(2, 0, 1) for fr in dataset.frames])
    return torch.from_numpy(stack).float()


def foreground_fraction(images: torch.Tensor, background, threshold: float = 0.1) -> float:
    """Mean fraction of pixels that depart from the flat background color."""
    bg = torch.tensor(background, dtype=images.dtype).view(1, 3, 1, 1)
    return float(((images - bg).abs().mean(dim=1) > threshold).float().mean())


def train_generator(
    dataset,
    config: TrainGanConfig | None = None,
    gen_config: GeneratorConfig | None = None,
    seed: int = 0,
):
    """Non-saturating GAN with a lazy gradient penalty on real batches.

    The dataset must cover only the in-domain pose cone; out-of-cone poses are
    rejected so the extrapolation problem stays real. Aborts with a
    mode-collapse diagnostic if sample diversity stays under the floor.
    Returns (generator, discriminator, trace).
    """
    cfg = config or TrainGanConfig()
    gcfg = gen_config or GeneratorConfig()
    h, w = dataset.resolution
    if (h, w) != (gcfg.resolution, gcfg.resolution):
        raise ValidationError(
            f"dataset resolution {dataset.resolution} != generator resolution {gcfg.resolution}"
        )
    tmax, pmax = cfg.pose_cone
    for i, fr in enumerate(dataset.frames):
        if abs(fr.pose.theta) > tmax + 1e-9 or abs(fr.pose.phi) > pmax + 1e-9:
            raise ValidationError(
                f"frame {i} pose ({fr.pose.theta:.3f}, {fr.pose.phi:.3f}) outside the training cone"
            )

    gen = ToyGenerator(gcfg)
    disc = Discriminator(gcfg)
    init_module(gen, derive_seed(seed, "gan-gen-init"))
    init_module(disc, derive_seed(seed, "gan-disc-init"))
    reals_all = dataset_to_tensor(dataset)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.0, 0.99))
    g_rng = generator(seed, "gan-noise")
    r_rng = generator(seed, "gan-reals")

    trace = []
    flat_steps = 0
    for it in range(cfg.iterations):
        real_idx = torch.randint(0, reals_all.shape[0], (cfg.batch,), generator=r_rng)
        reals = reals_all[real_idx]
        z = torch.randn(cfg.batch, gcfg.latent_dim, generator=g_rng)
        with torch.no_grad():
            fakes = gen.sample_images(z)

        if cfg.r1_every > 0 and it % cfg.r1_every == 0:
            reals_rg = reals.detach().requires_grad_(True)
            d_real = disc(reals_rg)
            (r1_grad,) = torch.autograd.grad(d_real.sum(), reals_rg, create_graph=True)
            r1 = r1_grad.pow(2).sum(dim=(1, 2, 3)).mean()
            loss_d = (
                F.softplus(-d_real).mean()
                + F.softplus(disc(fakes)).mean()
                + 0.5 * cfg.r1_gamma * cfg.r1_every * r1
            )
        else:
            loss_d = F.softplus(-disc(reals)).mean() + F.softplus(disc(fakes)).mean()
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        z = torch.randn(cfg.batch, gcfg.latent_dim, generator=g_rng)
        fakes = gen.sample_images(z)
        loss_g = F.softplus(-disc(fakes)).mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            raise DivergenceError(f"non-finite GAN loss at iteration {it}", iteration=it, lr=cfg.lr)
        diversity = float(fakes.detach().std(dim=0).mean())
        flat_steps = flat_steps + 1 if diversity < cfg.collapse_floor else 0
        if flat_steps >= cfg.collapse_patience:
            raise DivergenceError(
                f"mode collapse: sample diversity {diversity:.4f} below "
                f"{cfg.collapse_floor} for {flat_steps} iterations",
                iteration=it,
            )
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss_d.item(), loss_g.item()))
    return gen, disc, trace


def train_encoder(
    gen: ToyGenerator, config: TrainEncoderConfig | None = None, seed: int = 0
):
    """Fit the encoder on (generated image, latent) pairs, then polish the
    refinement head with an image-space reconstruction loss through the
    frozen generator. Returns (encoder, trace)."""
    cfg = config or TrainEncoderConfig()
    gcfg = gen.config
    enc = InversionEncoder(gcfg)
    init_module(enc, derive_seed(seed, "encoder-init"))
    enc.zero_refinement()
    rng = generator(seed, "encoder-noise")
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    trace = []
    for it in range(cfg.iterations):
        z = torch.randn(cfg.batch, gcfg.latent_dim, generator=rng)
        with torch.no_grad():
            w = gen.mapping(z)
            imgs = gen.synthesis(w[:, None, :].expand(-1, gcfg.stages, -1))
        loss = F.mse_loss(enc(imgs), w)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite encoder loss at iteration {it}", iteration=it, lr=cfg.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss.item()))

    refine_params = [enc.refine_hidden.weight, enc.refine_hidden.bias,
                     enc.refine_out.weight, enc.refine_out.bias]
    opt2 = torch.optim.Adam(refine_params, lr=cfg.refine_lr)
    for it in range(cfg.refine_iterations):
        z = torch.randn(cfg.refine_batch, gcfg.latent_dim, generator=rng)
        with torch.no_grad():
            w = gen.mapping(z)
            imgs = gen.synthesis(w[:, None, :].expand(-1, gcfg.stages, -1))
        w_hat = enc(imgs)
        recon = gen.synthesis(w_hat[:, None, :].expand(-1, gcfg.stages, -1))
        loss = (recon - imgs).abs().mean()
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite refinement loss at iteration {it}", iteration=it, lr=cfg.refine_lr
            )
        opt2.zero_grad()
        loss.backward()
        opt2.step()
        if it % cfg.log_every == 0 or (cfg.refine_iterations and it == cfg.refine_iterations - 1):
            trace.append((cfg.iterations + it, loss.item()))
    return enc, trace


def finetune_generator(
    gen: ToyGenerator, pivot_code: LatentCode, target, config: PivotalConfig | None = None
):
    """Pivot-locked finetuning: freeze the inverted code, adapt synthesis
    weights to reconstruct the target. Operates on (and returns) a copy, with
    the loss trace. Zero iterations returns parameters unchanged."""
    cfg = config or PivotalConfig()
    target_t = to_generator_tensor(target)
    res = gen.config.resolution
    if target_t.shape[1] != res or target_t.shape[2] != res:
        raise ValidationError(f"target {tuple(target_t.shape[1:])} != generator resolution {res}")
    tuned = copy.deepcopy(gen)
    code = pivot_code.detached()
    opt = torch.optim.Adam(tuned.synthesis.parameters(), lr=cfg.lr)
    trace = []
    for it in range(cfg.iterations):
        recon = tuned.forward_code(code)
        loss = F.mse_loss(recon, target_t)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite pivotal loss at iteration {it}", iteration=it, lr=cfg.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss.item()))
    return tuned, trace
