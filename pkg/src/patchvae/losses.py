"""Reconstruction losses, Laplacian weight masks and the full objectives.

Reconstruction error is a per-pixel mean. KL terms are summed over latent
elements per image and averaged over the batch; when ``kl_per_pixel`` is on
(the default) their weights are divided by the number of pixel values per
image so that beta means the same thing at every resolution and the
recon/KL balance equals that of a summed squared error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import distributions as D
from .model import ModelConfig, PatchOutput

CELL = 8
LUMA = (0.299, 0.587, 0.114)


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl_occ: torch.Tensor
    kl_app: torch.Tensor
    total: torch.Tensor
    w_occ: float
    w_app: float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("recon", "kl_occ", "kl_app", "total")}

    def recombined(self) -> torch.Tensor:
        return self.recon + self.w_occ * self.kl_occ + self.w_app * self.kl_app


def l2_recon(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean()


def luminance(x: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 1, H, W)."""
    w = x.new_tensor(LUMA).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def laplacian_energy(x: torch.Tensor) -> torch.Tensor:
    """|4-neighbour Laplacian| of the luminance, replicate borders. (B, 1, H, W)."""
    g = F.pad(luminance(x), (1, 1, 1, 1), mode="replicate")
    kernel = g.new_tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]).view(1, 1, 3, 3)
    return F.conv2d(g, kernel).abs()


def laplacian_weight_mask(x: torch.Tensor) -> torch.Tensor:
    """Per-image (B, H/8, W/8) weights proportional to mean gradient energy per 8x8 cell.

    Each mask sums to one. Images with no gradient energy get a uniform mask.
    """
    with torch.no_grad():
        if x.dim() == 3:
            x = x.unsqueeze(0)
        B, _, H, W = x.shape
        if H % CELL or W % CELL:
            raise ValueError(f"image size {H}x{W} is not a multiple of {CELL}")
        energy = F.avg_pool2d(laplacian_energy(x), CELL).squeeze(1)
        total = energy.sum(dim=(1, 2), keepdim=True)
        uniform = torch.full_like(energy, 1.0 / (energy.shape[1] * energy.shape[2]))
        flat = total <= 0
        mask = torch.where(flat, uniform, energy / torch.where(flat, torch.ones_like(total), total))
    return mask


def cell_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error inside each 8x8 cell, averaged over channels: (B, H/8, W/8)."""
    B, C, H, W = x.shape
    sq = (x - x_hat).pow(2).view(B, C, H // CELL, CELL, W // CELL, CELL)
    return sq.mean(dim=(1, 3, 5))


def weighted_recon(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    cells = cell_mse(x, x_hat)
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).expand_as(cells)
    if mask.shape != cells.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match cell grid {tuple(cells.shape)}")
    return (mask * cells).sum(dim=(1, 2)).mean()


def reconstruction(x: torch.Tensor, x_hat: torch.Tensor, variant: str = "plain") -> torch.Tensor:
    if variant == "plain":
        return l2_recon(x, x_hat)
    if variant == "weighted":
        return weighted_recon(x, x_hat, laplacian_weight_mask(x))
    raise ValueError(f"unknown loss variant {variant!r}")


def kl_scale(x: torch.Tensor, per_pixel: bool) -> float:
    return 1.0 / x[0].numel() if per_pixel else 1.0


def patchvae_objective(x: torch.Tensor, out: PatchOutput, cfg: ModelConfig, variant: str = "plain",
                       kl_per_pixel: bool = True) -> LossBreakdown:
    batch = x.shape[0]
    recon = reconstruction(x, out.x_hat, variant)
    kl_occ = D.kl_bernoulli(out.posterior.occurrence, cfg.p_prior).sum() / batch
    kl_app = D.kl_gaussian_std(out.posterior.appearance) / batch
    s = kl_scale(x, kl_per_pixel)
    w_occ, w_app = cfg.beta_occ * s, cfg.beta_app * s
    total = recon + w_occ * kl_occ + w_app * kl_app
    return LossBreakdown(recon, kl_occ, kl_app, total, w_occ, w_app)


def betavae_objective(x: torch.Tensor, x_hat: torch.Tensor, post: D.GaussianParams, beta: float,
                      variant: str = "plain", kl_per_pixel: bool = True) -> LossBreakdown:
    recon = reconstruction(x, x_hat, variant)
    kl = D.kl_gaussian_std(post) / x.shape[0]
    w = beta * kl_scale(x, kl_per_pixel)
    zero = torch.zeros((), dtype=recon.dtype)
    return LossBreakdown(recon, zero, kl, recon + w * kl, 0.0, w)


def mask_to_image(mask, scale: int = CELL) -> np.ndarray:
    """Weight mask -> 8-bit grayscale image, max weight at 255, each cell scale x scale pixels."""
    m = np.asarray(mask.detach().cpu() if torch.is_tensor(mask) else mask, dtype=np.float64)
    peak = m.max()
    m = m / peak if peak > 0 else m
    img = np.round(m * 255).astype(np.uint8)
    return np.kron(img, np.ones((scale, scale), dtype=np.uint8))
