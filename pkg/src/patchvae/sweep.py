"""One-factor-at-a-time ablation harness over N, d_p, the occurrence prior and beta_occ."""

from __future__ import annotations

import csv
import logging

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import Dataset
from .model import ModelConfig
from .metrics import psnr
from .probe import ProbeConfig, build_classifier, train_probe
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_AXES: dict[str, tuple] = {
    "N": (4, 8, 16, 32, 64),
    "d_p": (3, 6, 9),
    "p_prior": (0.01, 0.05, 0.1),
    "beta_occ": (0.06, 0.3, 0.6),
}

SWEEP_FIELDS = ("axis", "value", "N", "d_p", "p_prior", "beta_occ", "epochs", "recon", "kl_occ", "kl_app",
                "total", "psnr", "top1", "top5")


def ablation_cells(base: ModelConfig, axes: dict[str, tuple] | None = None) -> list[tuple[str, object, ModelConfig]]:
    """Vary one hyper-parameter at a time around ``base``.

    The occurrence prior follows 1/N unless it is the axis being varied.
    """
    axes = ABLATION_AXES if axes is None else axes
    cells = []
    fixed_prior = base.p_prior if base.p_prior != 1.0 / base.N else None
    for axis, values in axes.items():
        for v in values:
            d = base.to_dict()
            d["p_prior"] = fixed_prior
            d[axis] = v
            cells.append((axis, v, ModelConfig.from_dict(d)))
    return cells


def reconstruction_psnr(model, ds: Dataset, limit: int = 256) -> float:
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(ds.images[:limit].transpose(0, 3, 1, 2)))
    with torch.no_grad():
        x_hat = model(x).x_hat
    return psnr(ds.images[:limit], x_hat.permute(0, 2, 3, 1).numpy())


def run_sweep(base: ModelConfig, train_cfg: TrainConfig, train_ds: Dataset, probe_cfg: ProbeConfig | None = None,
              test_ds: Dataset | None = None, out_csv=None, axes: dict[str, tuple] | None = None) -> list[dict]:
    """Train (and optionally probe) every ablation cell; one result row per cell."""
    rows = []
    for axis, value, cfg in ablation_cells(base, axes):
        state = train(cfg, train_ds, train_cfg)
        last = state.epoch_history[-1] if state.epoch_history else {}
        row = {
            "axis": axis,
            "value": value,
            "N": cfg.N,
            "d_p": cfg.d_p,
            "p_prior": cfg.p_prior,
            "beta_occ": cfg.beta_occ,
            "epochs": state.epoch,
            **{k: last.get(k, float("nan")) for k in ("recon", "kl_occ", "kl_app", "total")},
            "psnr": reconstruction_psnr(state.model, train_ds),
            "top1": float("nan"),
            "top5": float("nan"),
        }
        if probe_cfg is not None and test_ds is not None:
            ckpt: Checkpoint = state.to_checkpoint(train_cfg)
            clf = build_classifier(ckpt, probe_cfg)
            report = train_probe(clf, train_ds, test_ds, probe_cfg)
            row["top1"], row["top5"] = report.top1, report.top5
        log.info("sweep cell %s=%s: %s", axis, value, row)
        rows.append(row)
        if out_csv:
            write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SWEEP_FIELDS})
