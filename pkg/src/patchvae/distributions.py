"""Reparameterizable latents: diagonal Gaussian and relaxed Bernoulli."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

PROB_EPS = 1e-6
LOGVAR_RANGE = (-10.0, 10.0)


@dataclass
class GaussianParams:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")
        self.logvar = self.logvar.clamp(*LOGVAR_RANGE)


@dataclass
class BernoulliParams:
    probs: torch.Tensor

    def __post_init__(self):
        self.probs = clamp_probs(self.probs)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Exponential decay ``tau0 * exp(-rate * step)`` floored at ``tau_min``."""

    tau0: float = 1.0
    rate: float = 3e-5
    tau_min: float = 0.4

    def __post_init__(self):
        if self.tau0 <= 0 or self.rate < 0 or self.tau_min <= 0:
            raise ValueError("temperature schedule needs tau0 > 0, rate >= 0, tau_min > 0")


def clamp_probs(p: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def _logit(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p) - torch.log1p(-p)


def sample_gaussian(params: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != params.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(params.mu.shape)}")
    return params.mu + torch.exp(0.5 * params.logvar) * noise


def kl_gaussian_std(params: GaussianParams, reduce: bool = True) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over all elements when ``reduce``."""
    kl = -0.5 * (1 + params.logvar - params.mu.pow(2) - params.logvar.exp())
    return kl.sum() if reduce else kl


def kl_bernoulli(q: BernoulliParams, p_prior: float) -> torch.Tensor:
    """Elementwise KL(Bern(q) || Bern(p_prior)); callers sum over locations."""
    if not 0.0 < p_prior < 1.0:
        raise ValueError(f"p_prior must lie in (0, 1), got {p_prior}")
    probs = q.probs
    return probs * (torch.log(probs) - math.log(p_prior)) + (1 - probs) * (
        torch.log1p(-probs) - math.log1p(-p_prior)
    )


def sample_relaxed_bernoulli(q: BernoulliParams, tau: float, uniform_noise: torch.Tensor) -> torch.Tensor:
    """Binary Concrete sample ``sigmoid((logit(q) + logit(u)) / tau)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if uniform_noise.shape != q.probs.shape:
        raise ValueError(f"noise shape {tuple(uniform_noise.shape)} != probs shape {tuple(q.probs.shape)}")
    u = clamp_probs(uniform_noise)
    return torch.sigmoid((_logit(q.probs) + _logit(u)) / tau)


def harden(q: BernoulliParams | torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """1 where the probability is strictly above ``threshold``, else 0."""
    probs = q.probs if isinstance(q, BernoulliParams) else q
    return (probs > threshold).to(probs.dtype)


def temperature_at(schedule: TemperatureSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    return max(schedule.tau_min, schedule.tau0 * math.exp(-schedule.rate * step))
