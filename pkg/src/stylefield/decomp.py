"""Differentiable latent-basis decomposition.

Forward: sample latent codes through the mapping network, form their
covariance, and extract the top-k eigenvectors by power iteration with
deflation. Backward: closed-form implicit gradient of the eigenbasis with
respect to the covariance, derived from the constrained trace problem

    minimize over U:  -tr(U^T C U)   subject to  U^T U = I_k.

Writing f(C, U) = -tr(U^T C U) and h(U) = U^T U - I, the solution map's
Jacobian is assembled from A = D_U h, B = D^2_{CU} f, and
H = D^2_{UU} f - <mult, D^2_{UU} h>, with the symmetric multiplier matrix
recovered from stationarity, mult = -V^T C V. Because the trace objective is
invariant to rotations inside the selected subspace, H is singular exactly
along the per-column radial directions; the pseudo-inverse (computed by a
dense eigendecomposition of H - sizes here are small) selects the eigenvector
solution branch, and the constraint-projection correction vanishes at exact
solutions. All gradients live on symmetric matrices and are symmetrized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from stylefield.errors import ConvergenceError, DegenerateSpectrumError, ValidationError
from stylefield.seeding import generator

GAP_RTOL = 1e-6  # minimum eigenvalue gap, relative to the top eigenvalue
_NULL_RTOL = 1e-7


@dataclass
class OrthogonalBasis:
    """Column-orthonormal eigenvectors of a covariance, eigenvalues sorted
    non-increasing; the largest-magnitude entry of each column is positive."""

    vectors: torch.Tensor  # (D, k)
    lambdas: torch.Tensor  # (k,)

    def validate(self, cov: torch.Tensor | None = None) -> None:
        v = self.vectors
        k = v.shape[1]
        gram = v.T @ v - torch.eye(k, dtype=v.dtype)
        if gram.abs().max() > 1e-6:
            raise ValidationError("basis columns are not orthonormal within 1e-6")
        if cov is not None:
            resid = cov @ v - v * self.lambdas[None, :]
            bound = 1e-5 * max(float(self.lambdas[0]), 1.0)
            if resid.norm(dim=0).max() > bound:
                raise ValidationError("eigen residual exceeds tolerance")


def draw_latent_inputs(n: int, dim: int, seed: int) -> torch.Tensor:
    """Standard-normal inputs for the mapping network; pure function of seed."""
    if n < 1:
        raise ValidationError("need at least one sample")
    return torch.randn(n, dim, generator=generator(seed, "latent-z"))


def sample_latents(mapping, n: int, seed: int) -> torch.Tensor:
    """(n, D) latent codes mapped from seeded normal draws."""
    z = draw_latent_inputs(n, mapping.in_dim, seed)
    return mapping(z)


def covariance(latents: torch.Tensor) -> torch.Tensor:
    """Sample covariance (rows are observations), symmetrized exactly."""
    n = latents.shape[0]
    if n < 2:
        raise ValidationError("covariance needs at least 2 rows")
    centered = latents - latents.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / (n - 1)
    return 0.5 * (cov + cov.T)


def _fix_signs(vectors: torch.Tensor) -> torch.Tensor:
    idx = vectors.abs().argmax(dim=0)
    signs = torch.sign(vectors[idx, torch.arange(vectors.shape[1])])
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    return vectors * signs


def top_k_eigvecs(
    cov: torch.Tensor,
    k: int,
    tol: float = 1e-9,
    max_iters: int = 500,
    start_vectors: torch.Tensor | None = None,
) -> OrthogonalBasis:
    """Top-k eigenpairs by power iteration with deflation.

    Each column starts from a fixed vector, is re-orthogonalized against the
    columns already extracted, and iterates until the direction change drops
    below tol. Non-convergence raises ConvergenceError carrying the residual.

    start_vectors warm-starts the columns (e.g. the previous basis when the
    covariance evolves slowly under training); convergence criteria are
    unchanged, only the initial guess improves.
    """
    d = cov.shape[0]
    if cov.shape != (d, d):
        raise ValidationError("covariance must be square")
    if not (1 <= k <= d):
        raise ValidationError(f"k={k} outside 1..{d}")
    if (cov - cov.T).abs().max() > 1e-8 * max(1.0, float(cov.abs().max())):
        raise ValidationError("covariance must be symmetric")
    work = cov.to(torch.float64)
    deflated = work.clone()
    start = torch.arange(1, d + 1, dtype=torch.float64)
    start = start / start.norm()

    warm = None
    if start_vectors is not None:
        if start_vectors.shape != (d, k):
            raise ValidationError(f"start vectors shape {tuple(start_vectors.shape)} != {(d, k)}")
        warm = start_vectors.to(torch.float64)

    def fresh_start(prevs, j):
        # warm start if supplied, then the fixed start vector, then canonical
        # axes when the projection against extracted columns eats a candidate
        candidates = [] if warm is None else [warm[:, j]]
        candidates += [start] + [torch.eye(d, dtype=torch.float64)[:, i] for i in range(d)]
        for candidate in candidates:
            v = candidate.clone()
            for prev in prevs:
                v = v - (prev @ v) * prev
            n = v.norm()
            if n > 1e-6:
                return v / n
        raise ValidationError("could not build a start vector orthogonal to the basis")

    # a converged column must also satisfy the basis residual invariant;
    # direction change alone can look small while crawling along a near-
    # degenerate pair.
    top_scale = None
    vectors, lambdas = [], []
    for j in range(k):
        v = fresh_start(vectors, j)
        converged = False
        for _ in range(max_iters):
            u = deflated @ v
            for prev in vectors:
                u = u - (prev @ u) * prev
            norm = u.norm()
            if norm < 1e-30:
                # deflated operator vanished: remaining spectrum is zero
                u = v
                converged = True
                break
            u = u / norm
            if (u - v * torch.sign(v @ u)).norm() < tol:
                v = u
                lam_est = float(v @ (deflated @ v))
                scale = top_scale if top_scale is not None else max(abs(lam_est), 1.0)
                if float((deflated @ v - lam_est * v).norm()) <= 1e-6 * max(scale, 1.0):
                    converged = True
                    break
            v = u
        if not converged:
            lam = float(v @ (work @ v))
            residual = float((work @ v - lam * v).norm())
            raise ConvergenceError(
                f"power iteration did not converge within {max_iters} iterations",
                residual=residual,
            )
        lam = v @ (work @ v)
        if top_scale is None:
            top_scale = max(abs(float(lam)), 1.0)
        vectors.append(v)
        lambdas.append(lam)
        deflated = deflated - lam * torch.outer(v, v)
    vec = torch.stack(vectors, dim=1)
    lam = torch.stack(lambdas)
    order = torch.argsort(lam, descending=True, stable=True)
    basis = OrthogonalBasis(
        vectors=_fix_signs(vec[:, order]).to(cov.dtype), lambdas=lam[order].to(cov.dtype)
    )
    basis.validate(cov)
    return basis


def check_spectrum_gaps(cov: torch.Tensor, lambdas: torch.Tensor) -> None:
    """Raise DegenerateSpectrumError when any gap among the retained
    eigenvalues (including the gap to the first discarded one) falls below
    GAP_RTOL * lambda_1; the implicit function is not differentiable there."""
    k = lambdas.shape[0]
    full = torch.linalg.eigvalsh(cov.to(torch.float64)).flip(0)
    top = float(full[0].abs().clamp(min=1e-30))
    gap_min = GAP_RTOL * top
    tail = full[k] if k < full.shape[0] else None
    seq = lambdas.to(torch.float64)
    gaps = [float(seq[j] - seq[j + 1]) for j in range(k - 1)]
    if tail is not None:
        gaps.append(float(seq[-1] - tail))
    if gaps and min(gaps) < gap_min:
        raise DegenerateSpectrumError(
            f"eigenvalue gap {min(gaps):.3e} below threshold {gap_min:.3e}", gap=min(gaps)
        )


def ddn_backward(cov: torch.Tensor, basis: OrthogonalBasis, upstream: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar loss w.r.t. the covariance, given its gradient
    w.r.t. the basis vectors.

    Assembles H, A and the multiplier matrix in dense vec form (column-major
    stacking of the basis columns), applies the spectral pseudo-inverse of H,
    and subtracts the constraint-projection correction computed with a
    pseudo-inverted A H^+ A^T (identically zero at exact eigen solutions).
    The result is symmetrized: perturbations of the covariance live on
    symmetric matrices.
    """
    v = basis.vectors.to(torch.float64)
    lam = basis.lambdas.to(torch.float64)
    c = cov.to(torch.float64)
    g_up = upstream.to(torch.float64)
    d, k = v.shape
    if g_up.shape != (d, k):
        raise ValidationError(f"upstream shape {tuple(g_up.shape)} != {(d, k)}")
    basis.validate()
    check_spectrum_gaps(c, lam)

    mult = -(v.T @ c @ v)
    mult = 0.5 * (mult + mult.T)
    h_mat = -2.0 * torch.kron(torch.eye(k, dtype=torch.float64), c) - 2.0 * torch.kron(
        mult, torch.eye(d, dtype=torch.float64)
    )
    w, q = torch.linalg.eigh(h_mat)
    scale = float(w.abs().max().clamp(min=1e-30))
    inv_w = torch.where(w.abs() > scale * _NULL_RTOL, 1.0 / w, torch.zeros_like(w))
    h_pinv = (q * inv_w) @ q.T

    gvec = g_up.T.reshape(-1)
    u = h_pinv @ gvec

    rows = []
    for j in range(k):
        for l in range(j, k):
            a = torch.zeros(d * k, dtype=torch.float64)
            if j == l:
                a[j * d : (j + 1) * d] = 2.0 * v[:, j]
            else:
                a[j * d : (j + 1) * d] = v[:, l]
                a[l * d : (l + 1) * d] = v[:, j]
            rows.append(a)
    a_mat = torch.stack(rows)
    hp_at = h_pinv @ a_mat.T
    m = a_mat @ hp_at
    wm, qm = torch.linalg.eigh(m)
    m_thr = max(scale * _NULL_RTOL, float(inv_w.abs().max()) * 4.0) * 1e-6
    inv_wm = torch.where(wm.abs() > m_thr, 1.0 / wm, torch.zeros_like(wm))
    m_pinv = (qm * inv_wm) @ qm.T
    u = u - hp_at @ (m_pinv @ (a_mat @ u))

    u_mat = u.reshape(k, d).T
    grad = 2.0 * u_mat @ v.T
    return (0.5 * (grad + grad.T)).to(cov.dtype)


class _TopKEig(torch.autograd.Function):
    @staticmethod
    def forward(ctx, cov, k, tol, max_iters, start_vectors):
        with torch.no_grad():
            basis = top_k_eigvecs(
                cov, k, tol=tol, max_iters=max_iters, start_vectors=start_vectors
            )
        ctx.save_for_backward(cov, basis.vectors, basis.lambdas)
        ctx.mark_non_differentiable(basis.lambdas)
        return basis.vectors, basis.lambdas

    @staticmethod
    def backward(ctx, grad_vectors, _grad_lambdas):
        cov, vectors, lambdas = ctx.saved_tensors
        basis = OrthogonalBasis(vectors=vectors, lambdas=lambdas)
        grad_cov = ddn_backward(cov, basis, grad_vectors)
        return grad_cov, None, None, None, None


def differentiable_top_k(
    cov: torch.Tensor,
    k: int,
    tol: float = 1e-9,
    max_iters: int = 500,
    start_vectors: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(vectors, lambdas) with the implicit gradient attached to vectors."""
    return _TopKEig.apply(cov, k, tol, max_iters, start_vectors)
