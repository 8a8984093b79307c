"""Central-difference gradient checking against autograd/implicit backward.

The checker never touches the analytic path: it re-runs the full forward at
perturbed parameter values and compares directional derivatives coordinate
by coordinate on a sampled subset.
"""

from __future__ import annotations

import torch


def central_diff(loss_fn, param: torch.Tensor, index, eps: float) -> float:
    with torch.no_grad():
        orig = param.view(-1)[index].item()
        param.view(-1)[index] = orig + eps
        up = float(loss_fn())
        param.view(-1)[index] = orig - eps
        down = float(loss_fn())
        param.view(-1)[index] = orig
    return (up - down) / (2 * eps)


def check_group(
    loss_fn,
    param: torch.Tensor,
    grad: torch.Tensor,
    n_coords: int = 12,
    eps: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-8,
    seed: int = 0,
):
    """Compare analytic grad vs central differences on sampled coordinates.

    Returns the worst relative error; raises AssertionError on mismatch.
    """
    numel = param.numel()
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(numel, generator=gen)[: min(n_coords, numel)]
    worst = 0.0
    for i in idx.tolist():
        fd = central_diff(loss_fn, param, i, eps)
        an = grad.view(-1)[i].item()
        err = abs(an - fd)
        bound = rtol * max(abs(an), abs(fd)) + atol
        assert err <= bound, (
            f"coord {i}: analytic {an:.6e} vs fd {fd:.6e} (err {err:.2e} > {bound:.2e})"
        )
        denom = max(abs(an), abs(fd), atol)
        worst = max(worst, err / denom)
    return worst
