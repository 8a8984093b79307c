import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stylefield.decomp import (
    OrthogonalBasis,
    covariance,
    draw_latent_inputs,
    sample_latents,
    top_k_eigvecs,
)
from stylefield.errors import ConvergenceError, ValidationError


def spd(d, seed, gaps=1.0):
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(d, d, generator=g, dtype=torch.float64))
    lam = torch.sort(torch.rand(d, generator=g, dtype=torch.float64) * 2 + 0.3,
                     descending=True).values
    lam = lam + gaps * torch.linspace(1.5, 0.0, d, dtype=torch.float64)
    return (q * lam) @ q.T


def test_covariance_zero_for_identical_rows():
    w = torch.ones(10, 4) * 3.7
    assert torch.allclose(covariance(w), torch.zeros(4, 4))


def test_covariance_hand_case():
    w = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    expected = torch.tensor([[2.0, 0.0], [0.0, 0.0]])
    assert torch.allclose(covariance(w), expected)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=15)
def test_covariance_matches_double_loop_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(16, 4, generator=g, dtype=torch.float64)
    cov = covariance(w)
    n, d = w.shape
    mean = w.mean(dim=0)
    expected = torch.zeros(d, d, dtype=torch.float64)
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for r in range(n):
                acc += (w[r, i] - mean[i]) * (w[r, j] - mean[j])
            expected[i, j] = acc / (n - 1)
    assert (cov - expected).abs().max() < 1e-10
    assert torch.equal(cov, cov.T)


def test_covariance_needs_two_rows():
    with pytest.raises(ValidationError):
        covariance(torch.ones(1, 3))


def test_draw_latent_inputs_mean_small():
    z = draw_latent_inputs(100_000, 32, seed=1234)
    assert z.mean(dim=0).abs().max() < 0.02


def test_sample_latents_deterministic_and_shaped(small_gen):
    w1 = sample_latents(small_gen.mapping, 64, seed=5)
    w2 = sample_latents(small_gen.mapping, 64, seed=5)
    assert torch.equal(w1, w2)
    assert w1.shape == (64, small_gen.config.latent_dim)


def test_diag_case():
    basis = top_k_eigvecs(torch.diag(torch.tensor([3.0, 1.0])), k=1)
    assert torch.allclose(basis.vectors, torch.tensor([[1.0], [0.0]]), atol=1e-8)
    assert basis.lambdas[0] == pytest.approx(3.0, abs=1e-9)


def test_identity_degenerate_spectrum():
    basis = top_k_eigvecs(torch.eye(3), k=1)
    assert basis.lambdas[0] == pytest.approx(1.0, abs=1e-9)
    assert basis.vectors[:, 0].norm() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("k", [1, 3, 8])
def test_matches_dense_solver_oracle(k):
    cov = spd(8, seed=21)
    basis = top_k_eigvecs(cov, k=k)
    ref_vals, ref_vecs = np.linalg.eigh(cov.numpy())
    ref_vals = ref_vals[::-1][:k]
    np.testing.assert_allclose(basis.lambdas.numpy(), ref_vals, atol=1e-6)
    # subspace agreement via principal angles
    a = basis.vectors.numpy()
    b = ref_vecs[:, ::-1][:, :k]
    sv = np.linalg.svd(a.T @ b, compute_uv=False)
    assert np.abs(sv - 1.0).max() < 1e-6


def test_orthonormality_and_residual_invariants():
    cov = spd(12, seed=3)
    basis = top_k_eigvecs(cov, k=5)
    gram = basis.vectors.T @ basis.vectors
    assert (gram - torch.eye(5, dtype=gram.dtype)).abs().max() < 1e-6
    resid = cov @ basis.vectors - basis.vectors * basis.lambdas[None, :]
    assert resid.norm(dim=0).max() < 1e-5 * max(float(basis.lambdas[0]), 1.0)
    assert (basis.lambdas[:-1] >= basis.lambdas[1:] - 1e-12).all()


def test_sign_convention():
    cov = spd(6, seed=9)
    basis = top_k_eigvecs(cov, k=4)
    for j in range(4):
        col = basis.vectors[:, j]
        assert col[col.abs().argmax()] > 0


@pytest.mark.parametrize("c", [2.0, 0.5, 3.0])
def test_scale_covariance(c):
    cov = spd(6, seed=13)
    b1 = top_k_eigvecs(cov, k=3)
    b2 = top_k_eigvecs(c * cov, k=3)
    assert (b1.vectors - b2.vectors).abs().max() < 1e-9
    assert torch.allclose(b2.lambdas, c * b1.lambdas, rtol=1e-9)


def test_k_out_of_range_rejected():
    cov = spd(4, seed=1)
    with pytest.raises(ValidationError):
        top_k_eigvecs(cov, k=5)
    with pytest.raises(ValidationError):
        top_k_eigvecs(cov, k=0)


def test_asymmetric_rejected():
    m = torch.randn(4, 4, dtype=torch.float64)
    with pytest.raises(ValidationError):
        top_k_eigvecs(m, k=1)


def test_nonconvergence_carries_residual():
    g = torch.Generator().manual_seed(2)
    q, _ = torch.linalg.qr(torch.randn(6, 6, generator=g, dtype=torch.float64))
    lam = torch.tensor([1.0, 1.0 - 1e-9, 0.5, 0.4, 0.3, 0.2], dtype=torch.float64)
    cov = (q * lam) @ q.T
    with pytest.raises(ConvergenceError) as err:
        top_k_eigvecs(cov, k=2, tol=1e-15, max_iters=3)
    assert err.value.residual is not None


def test_basis_validate_rejects_bad_columns():
    bad = OrthogonalBasis(vectors=torch.eye(3)[:, :2] * 1.5, lambdas=torch.tensor([2.0, 1.0]))
    with pytest.raises(ValidationError):
        bad.validate()
