"""Unsupervised training loop: ADAM, temperature annealing, history, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import distributions as D
from .checkpoint import Checkpoint, load_model_arrays, model_arrays, save_checkpoint
from .data import Dataset, minibatches, num_batches
from .losses import LossBreakdown, betavae_objective, patchvae_objective
from .model import BetaVAE, ModelConfig, PatchVAE, build_model, draw_beta_noise, draw_patch_noise
from .nn import backward

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "recon", "kl_occ", "kl_app", "tau")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, batch_index, step, checkpoint_path=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau0: float = 1.0
    tau_rate: float = 3e-5
    tau_min: float = 0.4
    loss_variant: str = "plain"
    kl_per_pixel: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.loss_variant not in ("plain", "weighted"):
            raise ValueError(f"loss_variant must be plain or weighted, got {self.loss_variant!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def schedule(self) -> D.TemperatureSchedule:
        return D.TemperatureSchedule(self.tau0, self.tau_rate, self.tau_min)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk-synthetic": dict(epochs=10),
    "desk-cifar": dict(epochs=5),
    "cifar100": dict(epochs=90),
    "indoor67": dict(epochs=90),
    "places205": dict(epochs=2),
}


# ------------------------------------------------------------------ ADAM


def adam_step(params: dict, grads: dict, moments: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              t: int = 1) -> tuple[dict, dict]:
    """One bias-corrected ADAM update; returns new params and moments, inputs untouched.

    ``moments`` maps each name to a ``(m, v)`` pair.
    """
    if t < 1:
        raise ValueError("ADAM step count starts at 1")
    b1, b2 = betas
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        m, v = moments[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / ((v / c2).sqrt() + eps)
        new_moments[name] = (m, v)
    return new_params, new_moments


def zero_moments(model) -> dict:
    return {n: (torch.zeros_like(p), torch.zeros_like(p)) for n, p in model.named_parameters() if p.requires_grad}


# ----------------------------------------------------------------- state


@dataclass
class TrainState:
    model: PatchVAE | BetaVAE
    moments: dict
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    epoch_history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, seed: int = 0) -> "TrainState":
        torch.manual_seed(seed)
        model = build_model(model_cfg)
        return cls(model, zero_moments(model))

    def to_checkpoint(self, train_cfg: TrainConfig | None = None) -> Checkpoint:
        arrays = model_arrays(self.model)
        for n, (m, v) in self.moments.items():
            arrays[f"adam_m/{n}"] = m.detach().numpy().copy()
            arrays[f"adam_v/{n}"] = v.detach().numpy().copy()
        return Checkpoint(
            self.model.cfg,
            arrays,
            self.step,
            self.epoch,
            asdict(train_cfg) if train_cfg else {},
            [dict(h) for h in self.history],
            [dict(h) for h in self.epoch_history],
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        model = build_model(ckpt.model_config)
        load_model_arrays(model, ckpt)
        ms, vs = ckpt.group("adam_m"), ckpt.group("adam_v")
        moments = {}
        for n, p in model.named_parameters():
            if n in ms:
                moments[n] = (torch.from_numpy(ms[n].copy()), torch.from_numpy(vs[n].copy()))
            else:
                moments[n] = (torch.zeros_like(p), torch.zeros_like(p))
        return cls(model, moments, ckpt.step, ckpt.epoch, list(ckpt.history), list(ckpt.epoch_history))


def noise_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint64)[0]))


def epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 1]).generate_state(1)[0])


def compute_loss(model, x: torch.Tensor, cfg: TrainConfig, step: int) -> tuple[LossBreakdown, float]:
    tau = D.temperature_at(cfg.schedule, step)
    gen = noise_generator(cfg.seed, step)
    model.train(True)
    if isinstance(model, PatchVAE):
        noise = draw_patch_noise(model.cfg, x.shape[0], gen, x.dtype)
        out = model(x, noise, tau)
        lb = patchvae_objective(x, out, model.cfg, cfg.loss_variant, cfg.kl_per_pixel)
    else:
        z = draw_beta_noise(model.cfg, x.shape[0], gen, x.dtype)
        out = model(x, z)
        lb = betavae_objective(x, out.x_hat, out.posterior, model.cfg.beta, cfg.loss_variant, cfg.kl_per_pixel)
    return lb, tau


def train(state: TrainState | ModelConfig, dataset: Dataset, cfg: TrainConfig, out_dir=None,
          epochs: int | None = None) -> TrainState:
    """Run ``cfg.epochs`` epochs (or ``epochs`` more) of ADAM on ``dataset``.

    ``state`` may be a ModelConfig for a fresh run (seeded by ``cfg.seed``) or
    a TrainState to continue, e.g. one restored from a checkpoint.
    """
    if isinstance(state, ModelConfig):
        state = TrainState.fresh(state, cfg.seed)
    model = state.model
    mc = model.cfg
    if dataset.images.shape[1:3] != (mc.H, mc.W):
        raise ValueError(f"dataset resolution {dataset.images.shape[1:3]} != model {mc.H}x{mc.W}")
    out_dir = Path(out_dir) if out_dir else None
    target = state.epoch + epochs if epochs is not None else cfg.epochs
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    params = dict(model.named_parameters())

    while state.epoch < target:
        sums = {"recon": 0.0, "kl_occ": 0.0, "kl_app": 0.0, "total": 0.0}
        nb = 0
        for b, (xb, _) in enumerate(minibatches(dataset, cfg.batch_size, epoch_shuffle_seed(cfg.seed, state.epoch))):
            x = torch.from_numpy(np.ascontiguousarray(xb.transpose(0, 3, 1, 2)))
            lb, tau = compute_loss(model, x, cfg, state.step)
            if not torch.isfinite(lb.total):
                path = None
                if out_dir:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    path = out_dir / f"diverged_step{state.step}.pvae"
                    save_checkpoint(state.to_checkpoint(cfg), path)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {state.epoch}, batch {b} (step {state.step}): "
                    f"{ {k: float(v) for k, v in lb.as_floats().items()} }",
                    b, state.step, path,
                )
            grads = backward(lb.total, model)
            with torch.no_grad():
                current = {n: params[n].detach() for n in names}
                new, state.moments = adam_step(
                    current, grads, state.moments, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, state.step + 1
                )
                for n in names:
                    params[n].copy_(new[n])
            vals = {k: float(v) for k, v in lb.as_floats().items()}
            state.history.append({"step": state.step, **vals, "tau": tau})
            for k in sums:
                sums[k] += vals[k]
            nb += 1
            state.step += 1
        state.epoch += 1
        summary = {"epoch": state.epoch, **{k: v / max(nb, 1) for k, v in sums.items()}}
        state.epoch_history.append(summary)
        log.info("epoch %d: %s", state.epoch, summary)
        if out_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state.to_checkpoint(cfg), out_dir / f"epoch{state.epoch:03d}.pvae")
    return state


def expected_steps(count: int, batch_size: int, epochs: int) -> int:
    return epochs * num_batches(count, batch_size)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h["step"]] + [repr(float(h[k])) for k in HISTORY_FIELDS[1:]])


def read_history_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty history file")
        if tuple(header) != HISTORY_FIELDS:
            raise ValueError(f"{path}:1: expected header {','.join(HISTORY_FIELDS)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HISTORY_FIELDS):
                raise ValueError(f"{path}:{lineno}: expected {len(HISTORY_FIELDS)} fields, got {len(row)}")
            try:
                vals = [int(row[0])] + [float(v) for v in row[1:]]
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
            if not all(math.isfinite(v) for v in vals[1:]):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            rows.append(dict(zip(HISTORY_FIELDS, vals)))
    return rows
