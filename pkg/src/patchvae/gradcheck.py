"""Finite-difference certification of every layer kind, both samplers and both objectives."""

from __future__ import annotations

import torch
from torch import nn

from . import distributions as D
from .losses import betavae_objective, patchvae_objective
from .model import BetaVAE, ModelConfig, PatchVAE, draw_beta_noise, draw_patch_noise
from .nn import GradCheckReport, LayerSpec, LayerStack, conv, deconv, finite_difference_check

LAYER_CASES = {
    "conv": conv(3, 3, 2, 1, bias=True),
    "deconv": deconv(4, 3, 2, 1, bias=True),
    "batchnorm": LayerSpec("batchnorm"),
    "relu": LayerSpec("relu"),
    "leakyrelu": LayerSpec("leakyrelu", slope=0.2),
    "tanh": LayerSpec("tanh"),
    "sigmoid": LayerSpec("sigmoid"),
    "maxpool": LayerSpec("maxpool", kernel=3, stride=2, pad=1),
    "residual": LayerSpec("residual", 3, stride=2),
    "fc": LayerSpec("fc", 4),
}


def miniature_config(model_kind: str = "patchvae") -> ModelConfig:
    """8x8 inputs, two parts of two dimensions, 8-channel trunk."""
    return ModelConfig(model_kind=model_kind, N=2, d_p=2, d_e=8, stem_channels=4, H=8, W=8,
                       z_dim=3, head_channels=4, decoder_channels=(8, 4, 4))


class InputProbe(nn.Module):
    """Holds the input as a parameter so input gradients are certified alongside layer weights."""

    def __init__(self, stack: nn.Module, x: torch.Tensor):
        super().__init__()
        self.x = nn.Parameter(x)
        self.stack = stack

    def forward(self):
        return self.stack(self.x)


def randomize(module: nn.Module, generator: torch.Generator, scale: float = 0.5) -> None:
    """Replace every parameter with N(0, scale^2) draws (also undoes zero/constant initialisation)."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)


def check_layer(kind: str, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    spec = LAYER_CASES[kind]
    if kind == "fc":
        stack = LayerStack([LayerSpec("flatten"), spec], 2 * 4 * 4).double()
        x = torch.randn(3, 2, 4, 4, generator=g, dtype=torch.float64)
    else:
        stack = LayerStack([spec], 2).double()
        x = torch.randn(3, 2, 5, 5, generator=g, dtype=torch.float64)
    randomize(stack, g)
    probe = InputProbe(stack, x).train()
    with torch.no_grad():
        weights = torch.randn(probe().shape, generator=g, dtype=torch.float64)
    return finite_difference_check(probe, lambda m: (m() * weights).sum(), tolerance)


class _SamplerProbe(nn.Module):
    def __init__(self, kind: str, g: torch.Generator):
        super().__init__()
        self.kind = kind
        shape = (2, 3, 3)
        if kind == "gaussian":
            self.mu = nn.Parameter(torch.randn(shape, generator=g, dtype=torch.float64))
            self.logvar = nn.Parameter(torch.randn(shape, generator=g, dtype=torch.float64) * 0.5)
            self.noise = torch.randn(shape, generator=g, dtype=torch.float64)
        else:
            self.logits = nn.Parameter(torch.randn(shape, generator=g, dtype=torch.float64))
            self.noise = torch.rand(shape, generator=g, dtype=torch.float64) * 0.9 + 0.05
        self.weights = torch.randn(shape, generator=g, dtype=torch.float64)

    def forward(self):
        if self.kind == "gaussian":
            params = D.GaussianParams(self.mu, self.logvar)
            return (D.sample_gaussian(params, self.noise) * self.weights).sum() + D.kl_gaussian_std(params)
        q = D.BernoulliParams(torch.sigmoid(self.logits))
        sample = D.sample_relaxed_bernoulli(q, 0.7, self.noise)
        return (sample * self.weights).sum() + D.kl_bernoulli(q, 0.2).sum()


def check_sampler(kind: str, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    probe = _SamplerProbe(kind, torch.Generator().manual_seed(seed))
    return finite_difference_check(probe, lambda m: m(), tolerance)


def check_patchvae(seed: int = 0, variant: str = "plain", tolerance: float = 1e-4, batch: int = 3) -> GradCheckReport:
    """Full PatchVAE objective (train mode, fixed noise) on the miniature config."""
    g = torch.Generator().manual_seed(seed)
    cfg = miniature_config()
    torch.manual_seed(seed)
    model = PatchVAE(cfg).double().train()
    randomize(model, g, 0.4)
    x = torch.rand(batch, 3, cfg.H, cfg.W, generator=g, dtype=torch.float64) * 2 - 1
    noise = draw_patch_noise(cfg, batch, g, torch.float64)
    noise = noise._replace(occ_uniform=noise.occ_uniform * 0.9 + 0.05)

    def loss_fn(m):
        return patchvae_objective(x, m(x, noise, 0.7), cfg, variant).total

    return finite_difference_check(model, loss_fn, tolerance)


def check_betavae(seed: int = 0, tolerance: float = 1e-4, batch: int = 3) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    cfg = miniature_config("betavae")
    torch.manual_seed(seed)
    model = BetaVAE(cfg).double().train()
    randomize(model, g, 0.4)
    x = torch.rand(batch, 3, cfg.H, cfg.W, generator=g, dtype=torch.float64) * 2 - 1
    z = draw_beta_noise(cfg, batch, g, torch.float64)

    def loss_fn(m):
        out = m(x, z)
        return betavae_objective(x, out.x_hat, out.posterior, 1.0).total

    return finite_difference_check(model, loss_fn, tolerance)


def certify_all(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = {f"layer:{k}": check_layer(k, seed, tolerance) for k in LAYER_CASES}
    reports["sampler:gaussian"] = check_sampler("gaussian", seed, tolerance)
    reports["sampler:relaxed_bernoulli"] = check_sampler("bernoulli", seed, tolerance)
    reports["objective:patchvae"] = check_patchvae(seed, "plain", tolerance)
    reports["objective:patchvae_weighted"] = check_patchvae(seed, "weighted", tolerance)
    reports["objective:betavae"] = check_betavae(seed, tolerance)
    return reports
