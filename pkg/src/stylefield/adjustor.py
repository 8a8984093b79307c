"""Pose-conditioned latent adjustment.

A classifier picks which basis coordinates are view-related (sigmoid gate k)
and a regressor predicts traversal strengths d; the code moves as
w' = w + V (k * d). Training renders the adjusted code and matches it to the
field's render at the same pose; gradients reach the classifier, regressor,
and, through the implicit eigen gradient, the mapping network behind the
covariance, so the basis itself can rotate view variation into the retained
columns.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.decomp import (
    OrthogonalBasis,
    covariance,
    differentiable_top_k,
    draw_latent_inputs,
    top_k_eigvecs,
)
from stylefield.errors import (
    ConvergenceError,
    DegenerateSpectrumError,
    DivergenceError,
    ValidationError,
)
from stylefield.seeding import derive_seed, generator, init_module
from stylefield.sets import DOMAIN_IN, StylizedEntry, StylizedSet
from stylefield.stylegen.encoder import InversionEncoder, invert, to_generator_tensor
from stylefield.stylegen.generator import LatentCode, ToyGenerator


@dataclass
class PosedPair:
    """A field render and the pose it was rendered from."""

    image: np.ndarray  # (H, W, 3)
    theta: float
    phi: float


@dataclass(frozen=True)
class AdjustorTrainConfig:
    iterations: int = 1200
    batch: int = 2
    lr: float = 2e-3
    n_latents: int = 4096
    top_k: int = 16
    hidden: int = 64
    weight_l2: float = 1.0
    weight_perceptual: float = 0.5
    weight_identity: float = 0.5
    gamma_reg: float = 1e-3
    differentiable: bool = True
    max_retries: int = 3
    log_every: int = 25


class PoseAdjustor(nn.Module):
    """Classifier and regressor over (sin t, cos t, sin p, cos p); the angle
    encoding avoids the wrap discontinuity at +-pi."""

    def __init__(self, top_k: int, hidden: int = 64):
        super().__init__()
        self.top_k = top_k

        def mlp():
            return nn.Sequential(
                nn.Linear(4, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, top_k),
            )

        self.classifier = mlp()
        self.regressor = mlp()
        self.zero_strengths()

    def zero_strengths(self) -> None:
        """Traversal strengths start at zero everywhere; training grows them
        only where a pose actually needs adjustment."""
        nn.init.zeros_(self.regressor[-1].weight)
        nn.init.zeros_(self.regressor[-1].bias)

    def forward(self, theta: torch.Tensor, phi: torch.Tensor):
        x = torch.stack([theta.sin(), theta.cos(), phi.sin(), phi.cos()], dim=-1)
        return self.classifier(x), self.regressor(x)


@dataclass
class AdjustorParams:
    adjustor: PoseAdjustor
    basis: OrthogonalBasis
    base_code: LatentCode  # inversion of the unedited frontal view


def predict_adjust(theta: float, phi: float, params: AdjustorParams):
    """(k, d) for one pose; k is a sigmoid gate in (0, 1)^K."""
    if not (math.isfinite(theta) and math.isfinite(phi)):
        raise ValidationError("pose must be finite")
    t = torch.tensor([theta], dtype=torch.float32)
    p = torch.tensor([phi], dtype=torch.float32)
    with torch.no_grad():
        logits, d = params.adjustor(t, p)
    return torch.sigmoid(logits)[0], d[0]


def adjust_code(code: LatentCode, basis_vectors: torch.Tensor, k: torch.Tensor, d: torch.Tensor) -> LatentCode:
    """w' = w + V (k * d), broadcast over the code's stages."""
    if basis_vectors.shape[1] != k.shape[-1] or k.shape != d.shape:
        raise ValidationError(
            f"dimension mismatch: V {tuple(basis_vectors.shape)}, k {tuple(k.shape)}, d {tuple(d.shape)}"
        )
    delta = basis_vectors @ (k * d)
    return code.shifted(delta)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


_SSIM_WINDOW = _gaussian_window()


def _ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable structural similarity on luma; 11-wide Gaussian window."""
    luma = torch.tensor([0.299, 0.587, 0.114], dtype=a.dtype)
    ga = (a * luma[:, None, None]).sum(0, keepdim=True)[None]
    gb = (b * luma[:, None, None]).sum(0, keepdim=True)[None]
    win = _SSIM_WINDOW.to(a.dtype)[None, None]
    mu_a = F.conv2d(ga, win)
    mu_b = F.conv2d(gb, win)
    saa = F.conv2d(ga * ga, win) - mu_a * mu_a
    sbb = F.conv2d(gb * gb, win) - mu_b * mu_b
    sab = F.conv2d(ga * gb, win) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).mean()


def _grad_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dx = (a[:, :, 1:] - a[:, :, :-1]) - (b[:, :, 1:] - b[:, :, :-1])
    dy = (a[:, 1:, :] - a[:, :-1, :]) - (b[:, 1:, :] - b[:, :-1, :])
    return dx.abs().mean() + dy.abs().mean()


def binary_entropy(k: torch.Tensor) -> torch.Tensor:
    """Sum of per-coordinate binary entropies; zero exactly at k in {0, 1}."""
    return (torch.special.entr(k) + torch.special.entr(1.0 - k)).sum()


def adjustor_loss(
    i_hat: torch.Tensor,
    i_gt: torch.Tensor,
    k: torch.Tensor,
    encoder: InversionEncoder | None = None,
    weights: tuple[float, float, float] = (1.0, 0.5, 0.5),
    gamma_reg: float = 1e-3,
) -> dict[str, torch.Tensor]:
    """Weighted sum of pixel, structural, identity-proxy, and gate-sparsity
    terms. The structural term is a multi-scale SSIM complement plus an
    image-gradient L1; the identity term is the inversion encoder's feature
    distance. Both stand in for pretrained perceptual and face-identity
    networks, which this repo does not ship."""
    if i_hat.shape != i_gt.shape:
        raise ValidationError("images must share a resolution")
    l2 = ((i_hat - i_gt) ** 2).mean()
    half = (i_hat.shape[-1] // 2, i_hat.shape[-2] // 2)
    perc = (
        0.5 * (1.0 - _ssim_torch(i_hat, i_gt))
        + 0.5 * (1.0 - _ssim_torch(
            F.avg_pool2d(i_hat[None], 2)[0], F.avg_pool2d(i_gt[None], 2)[0]
        ))
        + _grad_l1(i_hat, i_gt)
    )
    if encoder is not None:
        fa = encoder.features(i_hat[None])
        fb = encoder.features(i_gt[None])
        ident = F.mse_loss(F.normalize(fa, dim=-1), F.normalize(fb, dim=-1))
    else:
        ident = torch.zeros((), dtype=i_hat.dtype)
    reg = binary_entropy(k)
    total = weights[0] * l2 + weights[1] * perc + weights[2] * ident + gamma_reg * reg
    return {"l2": l2, "perceptual": perc, "identity": ident, "reg": reg, "total": total}


_BASIS_MAX_ITERS = 20_000


def _build_basis(mapping, z_bank: torch.Tensor, k: int, differentiable: bool, warm=None):
    if differentiable:
        w = mapping(z_bank)
        cov = covariance(w)
        vectors, lambdas = differentiable_top_k(
            cov, k, max_iters=_BASIS_MAX_ITERS, start_vectors=warm
        )
        return vectors, lambdas, cov
    with torch.no_grad():
        w = mapping(z_bank)
        cov = covariance(w)
        basis = top_k_eigvecs(cov, k, max_iters=_BASIS_MAX_ITERS, start_vectors=warm)
    return basis.vectors, basis.lambdas, cov


def train_adjustor(
    pairs: list[PosedPair],
    frontal: np.ndarray,
    gen: ToyGenerator,
    encoder: InversionEncoder,
    config: AdjustorTrainConfig | None = None,
    seed: int = 0,
    domain=None,
    progress=None,
):
    """Fit the adjustor against field renders.

    The generator's synthesis stays frozen; a private copy of the mapping
    network receives gradients through the decomposition when the
    differentiable flag is on. A degenerate spectrum during backward causes a
    latent resample and retry, bounded by max_retries. Returns
    (AdjustorParams, trace).
    """
    cfg = config or AdjustorTrainConfig()
    if not pairs:
        raise ValidationError("no posed pairs")
    if domain is not None:
        for pr in pairs:
            if not domain.contains_angles(pr.theta, pr.phi):
                raise ValidationError(
                    f"pair pose ({pr.theta:.3f}, {pr.phi:.3f}) is out-of-domain"
                )
    base_code = invert(gen, encoder, frontal)
    mapping = copy.deepcopy(gen.mapping)
    adjustor = PoseAdjustor(cfg.top_k, cfg.hidden)
    init_module(adjustor, derive_seed(seed, "adjustor-init"))
    adjustor.zero_strengths()

    frozen = list(gen.synthesis.parameters()) + list(encoder.parameters())
    saved_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)

    groups = [{"params": list(adjustor.parameters()), "lr": cfg.lr}]
    if cfg.differentiable:
        # the implicit gradient grows like 1/gap; keep basis updates gentle
        groups.append({"params": list(mapping.parameters()), "lr": 0.25 * cfg.lr})
    opt = torch.optim.Adam(groups)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.iterations, eta_min=0.1 * cfg.lr
    )
    trainable = [p for g in groups for p in g["params"]]

    latent_seed = derive_seed(seed, "latent-bank")
    z_bank = draw_latent_inputs(cfg.n_latents, mapping.in_dim, latent_seed)
    images = torch.stack([to_generator_tensor(p.image) for p in pairs])
    thetas = torch.tensor([p.theta for p in pairs], dtype=torch.float32)
    phis = torch.tensor([p.phi for p in pairs], dtype=torch.float32)
    rng = generator(seed, "adjustor-batch")

    trace = []
    try:
        return _adjustor_loop(
            cfg, gen, encoder, adjustor, mapping, opt, z_bank, latent_seed,
            images, thetas, phis, rng, pairs, base_code, trace, seed, progress,
            trainable=trainable, sched=sched,
        )
    finally:
        for p, flag in zip(frozen, saved_flags):
            p.requires_grad_(flag)


def _adjustor_loop(
    cfg, gen, encoder, adjustor, mapping, opt, z_bank, latent_seed,
    images, thetas, phis, rng, pairs, base_code, trace, seed, progress,
    trainable=None, sched=None,
):
    resamples = 0
    it = 0
    warm = None
    while it < cfg.iterations:
        sel = torch.randint(0, len(pairs), (cfg.batch,), generator=rng)
        try:
            vectors, _, _ = _build_basis(mapping, z_bank, cfg.top_k, cfg.differentiable, warm)
            warm = vectors.detach().clone()
            logits, d = adjustor(thetas[sel], phis[sel])
            k = torch.sigmoid(logits)
            delta = (k * d) @ vectors.T  # (B, D)
            w_stages = (base_code.stages[None] + delta[:, None, :]).expand(
                -1, gen.config.stages, -1
            )
            renders = gen.synthesis(w_stages)
            losses = []
            for b in range(cfg.batch):
                comp = adjustor_loss(
                    renders[b], images[sel[b]], k[b], encoder,
                    (cfg.weight_l2, cfg.weight_perceptual, cfg.weight_identity),
                    cfg.gamma_reg,
                )
                losses.append(comp["total"])
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite adjustor loss at iteration {it}", iteration=it, lr=cfg.lr)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, 5.0)
        except (DegenerateSpectrumError, ConvergenceError):
            # both symptoms of clustered eigenvalues: resample and rebuild
            resamples += 1
            if resamples > cfg.max_retries:
                raise
            latent_seed = derive_seed(latent_seed, "resample", resamples)
            z_bank = draw_latent_inputs(cfg.n_latents, mapping.in_dim, latent_seed)
            continue
        opt.step()
        if sched is not None:
            sched.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            trace.append((it, loss.item()))
            if progress is not None:
                progress(it, loss.item())
        it += 1

    with torch.no_grad():
        w = mapping(z_bank)
        basis = top_k_eigvecs(
            covariance(w), cfg.top_k, max_iters=_BASIS_MAX_ITERS, start_vectors=warm
        )
    params = AdjustorParams(adjustor=adjustor, basis=basis, base_code=base_code.detached())
    return params, trace


def build_in_domain_set(
    code_styled: LatentCode,
    poses,
    params: AdjustorParams,
    gen: ToyGenerator,
    domain,
    intrinsics,
    resolution,
    appearance_start: int = 0,
) -> StylizedSet:
    """Adjust the edited code to each in-domain pose and generate guides."""
    entries = []
    for i, pose in enumerate(poses):
        if domain is not None and not domain.contains(pose):
            raise ValidationError(
                f"pose ({pose.theta:.3f}, {pose.phi:.3f}) is out-of-domain; use the mapper path"
            )
        k, d = predict_adjust(pose.theta, pose.phi, params)
        code = adjust_code(code_styled, params.basis.vectors, k, d)
        with torch.no_grad():
            img = gen.forward_code(code)
        entries.append(
            StylizedEntry(
                image=img.permute(1, 2, 0).numpy().astype(np.float32),
                pose=pose,
                appearance=appearance_start + i,
                domain=DOMAIN_IN,
            )
        )
    s = StylizedSet(entries=entries, resolution=resolution, intrinsics=intrinsics)
    s.validate(require_masks=False)
    return s
