"""PatchVAE and the beta-VAE baseline.

Both models share the ResNet-9 feature trunk. PatchVAE predicts, for each of
N parts, an occurrence probability at every grid cell and one pooled
appearance Gaussian; a sampled appearance vector is broadcast onto the cells
where the part occurs and the per-part maps are concatenated along channels
before decoding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
from torch import nn

from . import distributions as D
from .nn import LayerSpec, LayerStack, ShapeError, Trunk, deconv, init_weights

POOL_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    model_kind: str = "patchvae"
    N: int = 16
    d_p: int = 6
    d_e: int = 128
    stem_channels: int = 64
    H: int = 32
    W: int = 32
    p_prior: float | None = None
    beta_app: float = 1.0
    beta_occ: float = 0.3
    beta: float = 1.0
    z_dim: int = 96
    head_channels: int = 64
    decoder_channels: tuple[int, ...] = (256, 128, 64)
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.model_kind not in ("patchvae", "betavae"):
            raise ConfigError(f"unknown model_kind {self.model_kind!r}")
        if self.H % 8 or self.W % 8 or self.H < 8 or self.W < 8:
            raise ConfigError(f"input size {self.H}x{self.W} must be a positive multiple of 8")
        for name in ("N", "d_p", "d_e", "stem_channels", "z_dim", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.decoder_channels) != 3:
            raise ConfigError("decoder_channels needs three widths (1x1 stage and two upsampling stages)")
        if self.p_prior is None:
            self.p_prior = 1.0 / self.N
        if not 0.0 < self.p_prior < 1.0:
            raise ConfigError(f"p_prior must lie in (0, 1), got {self.p_prior}")
        if min(self.beta_app, self.beta_occ, self.beta) < 0:
            raise ConfigError("KL weights must be nonnegative")

    @property
    def h(self) -> int:
        return self.H // 8

    @property
    def w(self) -> int:
        return self.W // 8

    @property
    def L(self) -> int:
        return self.h * self.w

    @property
    def code_channels(self) -> int:
        return self.N * self.d_p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PatchPosterior:
    """Occurrence probabilities (B, N, h, w) and pooled appearance params (B, N, d_p)."""

    occ_probs: torch.Tensor
    app_mu: torch.Tensor
    app_logvar: torch.Tensor

    @property
    def occurrence(self) -> D.BernoulliParams:
        return D.BernoulliParams(self.occ_probs)

    @property
    def appearance(self) -> D.GaussianParams:
        return D.GaussianParams(self.app_mu, self.app_logvar)


@dataclass
class PatchLatentCode:
    zhat: torch.Tensor  # (B, N * d_p, h, w)
    occ_samples: torch.Tensor  # (B, N, h, w)
    app_samples: torch.Tensor  # (B, N, d_p)

    def part_slice(self, i: int) -> torch.Tensor:
        d_p = self.app_samples.shape[-1]
        return self.zhat[:, i * d_p : (i + 1) * d_p]


class PatchNoise(NamedTuple):
    occ_uniform: torch.Tensor  # (B, N, h, w) in (0, 1)
    app_normal: torch.Tensor  # (B, N, d_p)


class PatchOutput(NamedTuple):
    x_hat: torch.Tensor
    posterior: PatchPosterior
    code: PatchLatentCode


class BetaOutput(NamedTuple):
    x_hat: torch.Tensor
    posterior: D.GaussianParams


def draw_patch_noise(cfg: ModelConfig, batch: int, generator: torch.Generator | None = None,
                     dtype=torch.float32) -> PatchNoise:
    u = torch.rand(batch, cfg.N, cfg.h, cfg.w, generator=generator, dtype=dtype)
    n = torch.randn(batch, cfg.N, cfg.d_p, generator=generator, dtype=dtype)
    return PatchNoise(u, n)


def draw_beta_noise(cfg: ModelConfig, batch: int, generator: torch.Generator | None = None,
                    dtype=torch.float32) -> torch.Tensor:
    return torch.randn(batch, cfg.z_dim, generator=generator, dtype=dtype)


def _upsampling_tail(widths: tuple[int, ...]) -> list[LayerSpec]:
    c0, c1, c2 = widths
    act = LayerSpec("leakyrelu", slope=0.2)
    bn = LayerSpec("batchnorm")
    return [
        deconv(1, c0, 1, 0), bn, act,
        deconv(4, c1, 2, 1), bn, act,
        deconv(4, c2, 2, 1), bn, act,
        deconv(4, 3, 2, 1), LayerSpec("tanh"),
    ]


def patch_decoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    return _upsampling_tail(cfg.decoder_channels)


def beta_decoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    # a full-grid deconv lifts the 1x1 bottleneck back to h x w
    return [
        deconv((cfg.h, cfg.w), cfg.head_channels, 1, 0),
        LayerSpec("batchnorm"),
        LayerSpec("leakyrelu", slope=0.2),
    ] + _upsampling_tail(cfg.decoder_channels)


def _check_input(cfg: ModelConfig, x: torch.Tensor):
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, cfg.H, cfg.W):
        raise ShapeError(f"expected images of shape (B, 3, {cfg.H}, {cfg.W}), got {tuple(x.shape)}")


class PatchVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.model_kind != "patchvae":
            raise ConfigError("PatchVAE needs model_kind='patchvae'")
        self.cfg = cfg
        self.trunk = Trunk(cfg.stem_channels, cfg.d_e)
        self.occ_head = nn.Conv2d(cfg.d_e, cfg.N, 3, 1, 1)
        self.app_mu_head = nn.Conv2d(cfg.d_e, cfg.code_channels, 3, 1, 1)
        self.app_logvar_head = nn.Conv2d(cfg.d_e, cfg.code_channels, 3, 1, 1)
        self.decoder = LayerStack(patch_decoder_specs(cfg), cfg.code_channels)
        init_weights(self)
        with torch.no_grad():
            # start every cell at the occurrence prior
            self.occ_head.bias.fill_(math.log(cfg.p_prior / (1 - cfg.p_prior)))
        zero_output_layer(self.decoder)

    def encode_trunk(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(self.cfg, x)
        return self.trunk(x)

    def encode_occurrence(self, f: torch.Tensor) -> torch.Tensor:
        return D.clamp_probs(torch.sigmoid(self.occ_head(f)))

    def encode_appearance(self, f: torch.Tensor, occ_probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-location appearance maps pooled per part, weighted by occurrence probability."""
        B, N, h, w = occ_probs.shape
        mu_map = self.app_mu_head(f).view(B, N, self.cfg.d_p, h, w)
        logvar_map = self.app_logvar_head(f).view(B, N, self.cfg.d_p, h, w)
        return pool_by_occurrence(mu_map, occ_probs), pool_by_occurrence(logvar_map, occ_probs)

    def posterior(self, x: torch.Tensor) -> PatchPosterior:
        f = self.encode_trunk(x)
        probs = self.encode_occurrence(f)
        mu, logvar = self.encode_appearance(f, probs)
        return PatchPosterior(probs, mu, logvar.clamp(*D.LOGVAR_RANGE))

    def sample_code(self, post: PatchPosterior, noise: PatchNoise | None, tau: float) -> PatchLatentCode:
        if self.training:
            if noise is None:
                raise ValueError("train-mode forward needs explicit noise")
            occ = D.sample_relaxed_bernoulli(post.occurrence, tau, noise.occ_uniform)
            app = D.sample_gaussian(post.appearance, noise.app_normal)
        else:
            occ = D.harden(post.occ_probs, self.cfg.eval_threshold)
            app = post.app_mu
        return assemble(occ, app)

    def decode(self, zhat: torch.Tensor) -> torch.Tensor:
        return self.decoder(zhat)

    def forward(self, x: torch.Tensor, noise: PatchNoise | None = None, tau: float = 1.0) -> PatchOutput:
        post = self.posterior(x)
        code = self.sample_code(post, noise, tau)
        return PatchOutput(self.decode(code.zhat), post, code)


def zero_output_layer(decoder: LayerStack) -> None:
    """Zero the last deconv so an untrained decoder emits tanh(0) = 0 (mid grey)."""
    last = [m for m in decoder.layers if isinstance(m, nn.ConvTranspose2d)][-1]
    with torch.no_grad():
        last.weight.zero_()


def pool_by_occurrence(values: torch.Tensor, occ_probs: torch.Tensor, eps: float = POOL_EPS) -> torch.Tensor:
    """``sum_l q_l v_l / (sum_l q_l + eps)`` for values (B, N, d, h, w) and weights (B, N, h, w)."""
    q = occ_probs.unsqueeze(2)
    num = (q * values).sum(dim=(-2, -1))
    den = q.sum(dim=(-2, -1)) + eps
    return num / den


def assemble(occ_samples: torch.Tensor, app_samples: torch.Tensor) -> PatchLatentCode:
    """Broadcast each part's appearance onto its occurrence map; parts stacked along channels."""
    B, N, h, w = occ_samples.shape
    if app_samples.shape[:2] != (B, N):
        raise ShapeError(f"appearance {tuple(app_samples.shape)} does not match occurrence {tuple(occ_samples.shape)}")
    d_p = app_samples.shape[-1]
    zhat = occ_samples.unsqueeze(2) * app_samples.view(B, N, d_p, 1, 1)
    return PatchLatentCode(zhat.reshape(B, N * d_p, h, w), occ_samples, app_samples)


def forward_patchvae(model: PatchVAE, x, noise: PatchNoise | None, tau: float, train_mode: bool) -> PatchOutput:
    model.train(train_mode)
    return model(x, noise, tau)


class BetaVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.model_kind != "betavae":
            raise ConfigError("BetaVAE needs model_kind='betavae'")
        self.cfg = cfg
        self.trunk = Trunk(cfg.stem_channels, cfg.d_e)
        self.head = nn.Sequential(
            nn.Conv2d(cfg.d_e, cfg.head_channels, 1, 1, 0, bias=False),
            nn.BatchNorm2d(cfg.head_channels),
            nn.ReLU(),
        )
        kernel = (cfg.h, cfg.w)
        self.mu_head = nn.Conv2d(cfg.head_channels, cfg.z_dim, kernel, 1, 0)
        self.logvar_head = nn.Conv2d(cfg.head_channels, cfg.z_dim, kernel, 1, 0)
        self.decoder = LayerStack(beta_decoder_specs(cfg), cfg.z_dim)
        init_weights(self)
        zero_output_layer(self.decoder)

    def encode_trunk(self, x):
        _check_input(self.cfg, x)
        return self.trunk(x)

    def posterior(self, x) -> D.GaussianParams:
        g = self.head(self.encode_trunk(x))
        return D.GaussianParams(self.mu_head(g).flatten(1), self.logvar_head(g).flatten(1))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z.view(z.shape[0], -1, 1, 1))

    def forward(self, x, noise: torch.Tensor | None = None) -> BetaOutput:
        post = self.posterior(x)
        if self.training:
            if noise is None:
                raise ValueError("train-mode forward needs explicit noise")
            z = D.sample_gaussian(post, noise)
        else:
            z = post.mu
        return BetaOutput(self.decode(z), post)


def forward_betavae(model: BetaVAE, x, noise, train_mode: bool = True) -> BetaOutput:
    model.train(train_mode)
    return model(x, noise)


def build_model(cfg: ModelConfig) -> PatchVAE | BetaVAE:
    return PatchVAE(cfg) if cfg.model_kind == "patchvae" else BetaVAE(cfg)
