import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchvae import distributions as D
from patchvae.losses import (betavae_objective, cell_mse, l2_recon, laplacian_weight_mask, mask_to_image,
                             patchvae_objective, weighted_recon)
from patchvae.model import ModelConfig, PatchLatentCode, PatchOutput, PatchPosterior


def test_l2_examples():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert l2_recon(x, x).item() == 0.0
    assert l2_recon(x, x + 0.3).item() == pytest.approx(0.09)


def test_two_cell_weighted_sum():
    x = torch.zeros(1, 3, 8, 16, dtype=torch.float64)
    x_hat = x.clone()
    x_hat[..., :8] = 1.0
    x_hat[..., 8:] = 2.0
    mask = torch.tensor([[[0.75, 0.25]]], dtype=torch.float64)
    assert weighted_recon(x, x_hat, mask).item() == pytest.approx(1.75)


def test_masked_out_error_is_free():
    x = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    x_hat = x.clone()
    x_hat[..., :8, :8] = 5.0
    mask = torch.tensor([[[0.0, 0.5], [0.25, 0.25]]], dtype=torch.float64)
    assert weighted_recon(x, x_hat, mask).item() == 0.0


def test_uniform_mask_reduces_to_l2():
    g = torch.Generator().manual_seed(0)
    x, y = (torch.rand(4, 3, 32, 32, generator=g, dtype=torch.float64) for _ in range(2))
    mask = torch.full((4, 4, 4), 1 / 16, dtype=torch.float64)
    a, b = weighted_recon(x, y, mask).item(), l2_recon(x, y).item()
    assert abs(a - b) / b < 1e-9


def test_constant_image_mask_exactly_uniform():
    m = laplacian_weight_mask(torch.full((1, 3, 32, 32), 0.4))
    assert torch.equal(m, torch.full_like(m, 1 / 16))


def test_bright_pixel_owns_its_cell():
    x = -torch.ones(1, 3, 32, 32, dtype=torch.float64)
    x[0, :, 11, 21] = 1.0  # interior of cell (1, 2)
    m = laplacian_weight_mask(x)[0]
    assert m[1, 2].item() == pytest.approx(1.0)
    assert m.sum().item() == pytest.approx(1.0)
    m[1, 2] = 0
    assert (m == 0).all()


def test_mask_sums_to_one_on_random_images():
    g = torch.Generator().manual_seed(3)
    masks = laplacian_weight_mask(torch.rand(100, 3, 32, 32, generator=g) * 2 - 1)
    assert torch.allclose(masks.double().sum(dim=(1, 2)), torch.ones(100, dtype=torch.float64), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 24]))
def test_mask_is_distribution(seed, size):
    g = torch.Generator().manual_seed(seed)
    m = laplacian_weight_mask(torch.rand(2, 3, size, size, generator=g, dtype=torch.float64))
    assert (m >= 0).all()
    assert torch.allclose(m.sum(dim=(1, 2)), torch.ones(2, dtype=torch.float64), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_weighted_recon_linear_in_squared_error(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x, y = (torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) for _ in range(2))
    mask = laplacian_weight_mask(x)
    base = weighted_recon(x, y, mask)
    scaled = weighted_recon(x, x + (y - x) * scale**0.5, mask)
    assert scaled.item() == pytest.approx(scale * base.item(), rel=1e-9)


def test_cell_mse_shape():
    assert cell_mse(torch.zeros(2, 3, 16, 24), torch.ones(2, 3, 16, 24)).shape == (2, 2, 3)


def _output_at_prior(cfg, x):
    B = x.shape[0]
    probs = torch.full((B, cfg.N, cfg.h, cfg.w), cfg.p_prior, dtype=torch.float64)
    mu = torch.zeros(B, cfg.N, cfg.d_p, dtype=torch.float64)
    post = PatchPosterior(probs, mu, torch.zeros_like(mu))
    return PatchOutput(x.clone(), post, PatchLatentCode(None, None, None))


def test_objective_zero_at_global_optimum():
    cfg = ModelConfig(N=4, d_p=2)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    lb = patchvae_objective(x, _output_at_prior(cfg, x), cfg)
    assert abs(lb.total.item()) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2), st.floats(0, 2), st.booleans())
def test_breakdown_recombines(seed, b_occ, b_app, per_pixel):
    cfg = ModelConfig(N=4, d_p=2, beta_occ=b_occ, beta_app=b_app)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    probs = torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64)
    mu, lv = (torch.randn(2, 4, 2, generator=g, dtype=torch.float64) for _ in range(2))
    out = PatchOutput(torch.rand_like(x), PatchPosterior(probs, mu, lv), None)
    lb = patchvae_objective(x, out, cfg, "weighted", per_pixel)
    assert abs((lb.recombined() - lb.total).item()) <= 1e-9 * max(1.0, abs(lb.total.item()))
    assert lb.kl_occ.item() >= 0 and lb.kl_app.item() >= 0


def test_betavae_degenerate_cases():
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    y = torch.rand_like(x)
    post = D.GaussianParams(torch.randn(2, 5, dtype=torch.float64), torch.randn(2, 5, dtype=torch.float64))
    assert betavae_objective(x, y, post, 0.0).total.item() == pytest.approx(l2_recon(x, y).item())
    zero = D.GaussianParams(torch.zeros(2, 5, dtype=torch.float64), torch.zeros(2, 5, dtype=torch.float64))
    assert betavae_objective(x, y, zero, 4.0).total.item() == pytest.approx(l2_recon(x, y).item())


def test_mask_to_image():
    img = mask_to_image(np.array([[0.5, 0.25], [0.25, 0.0]]))
    assert img.shape == (16, 16) and img.max() == 255 and img[-1, -1] == 0
