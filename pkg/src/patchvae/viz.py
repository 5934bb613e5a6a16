"""Qualitative artifacts: occurrence heatmaps, top part crops, appearance swaps,
weight-mask panels and training curves.

All model-facing functions run the model in eval mode under ``no_grad`` and
never modify it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from . import distributions as D  # noqa: E402
from .data import Dataset, denormalize  # noqa: E402
from .losses import laplacian_energy, laplacian_weight_mask  # noqa: E402
from .model import PatchVAE, assemble  # noqa: E402
from .trainer import read_history_csv  # noqa: E402

log = logging.getLogger(__name__)

BLEND_ALPHA = 0.5
HEAT_COLOR = np.array([255.0, 0.0, 0.0])
GRID_STRIDE = 8


def _nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def occurrence_probs(model: PatchVAE, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Eval-mode occurrence probabilities, (count, N, h, w)."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(model.posterior(_nchw(images[i : i + batch])).occ_probs.numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.N, model.cfg.h, model.cfg.w), np.float32)


def upsample_nearest(maps: np.ndarray, factor: int = GRID_STRIDE) -> np.ndarray:
    return maps.repeat(factor, axis=-2).repeat(factor, axis=-1)


def overlay(image: np.ndarray, prob_map: np.ndarray, alpha: float = BLEND_ALPHA) -> np.ndarray:
    """Blend a [0, 1] map (H, W), drawn in red, over an image (H, W, 3) in [-1, 1]. Returns uint8."""
    base = denormalize(image).astype(np.float64)
    heat = prob_map[..., None] * HEAT_COLOR
    return np.clip(np.rint((1 - alpha) * base + alpha * heat), 0, 255).astype(np.uint8)


def tile(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Lay out equally sized uint8 tiles in a grid with a white gutter."""
    th, tw = rows[0][0].shape[:2]
    ncols = max(len(r) for r in rows)
    out = np.full((len(rows) * (th + pad) + pad, ncols * (tw + pad) + pad, 3), 255, np.uint8)
    for r, row in enumerate(rows):
        for c, t in enumerate(row):
            y, x = pad + r * (th + pad), pad + c * (tw + pad)
            out[y : y + th, x : x + tw] = t if t.ndim == 3 else t[..., None]
    return out


def viz_parts(model: PatchVAE, images: np.ndarray, parts: list[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One panel row per part, one column per image: the part's occurrence map over the input.

    Returns the panel (uint8) and the upsampled maps (parts, images, H, W).
    """
    n = model.cfg.N
    parts = list(range(n)) if parts is None else list(parts)
    for p in parts:
        if not 0 <= p < n:
            raise IndexError(f"part index {p} out of range for N={n}")
    probs = occurrence_probs(model, images)
    maps = upsample_nearest(probs[:, parts]).transpose(1, 0, 2, 3)
    rows = [[overlay(images[j], maps[i, j]) for j in range(len(images))] for i in range(len(parts))]
    return tile(rows), maps


@dataclass
class Crop:
    image_index: int
    row: int
    col: int
    score: float
    pixels: np.ndarray


def crop_cell(image: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    """A size x size window centred on grid cell (row, col); out-of-image pixels are zero (mid grey)."""
    cy, cx = row * GRID_STRIDE + GRID_STRIDE // 2, col * GRID_STRIDE + GRID_STRIDE // 2
    half = size // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)))
    return padded[cy : cy + size, cx : cx + size].copy()


def top_crops(model: PatchVAE, dataset: Dataset | np.ndarray, part: int, k: int = 50,
              size: int = 2 * GRID_STRIDE, probs: np.ndarray | None = None) -> list[Crop]:
    """The ``k`` highest-probability occurrences of ``part``, score-descending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= part < model.cfg.N:
        raise IndexError(f"part index {part} out of range for N={model.cfg.N}")
    images = dataset.images if isinstance(dataset, Dataset) else dataset
    if probs is None:
        probs = occurrence_probs(model, images)
    scores = probs[:, part].reshape(-1)
    if len(scores) < k:
        log.warning("only %d candidate cells for top-%d crops; returning all", len(scores), k)
        k = len(scores)
    # stable sort: ties resolved by (image, row, col) order
    order = np.argsort(-scores, kind="stable")[:k]
    h, w = probs.shape[2:]
    crops = []
    for flat in order:
        i, rem = divmod(int(flat), h * w)
        r, c = divmod(rem, w)
        crops.append(Crop(i, r, c, float(scores[flat]), crop_cell(images[i], r, c, size)))
    return crops


def crops_panel(crops: list[Crop], per_row: int = 10, scale: int = 2) -> np.ndarray:
    tiles = [denormalize(c.pixels).repeat(scale, 0).repeat(scale, 1) for c in crops]
    rows = [tiles[i : i + per_row] for i in range(0, len(tiles), per_row)]
    return tile(rows)


def swap_appearance(model: PatchVAE, source: np.ndarray, source_part: int, target: np.ndarray,
                    target_part: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode the target with one part's appearance taken from the source image.

    Occurrence maps of the target are kept. Returns (original recon, swapped
    recon, target's hardened occurrence map for ``target_part``), images in
    (H, W, 3) layout.
    """
    n = model.cfg.N
    for p in (source_part, target_part):
        if not 0 <= p < n:
            raise IndexError(f"part index {p} out of range for N={n}")
    model.eval()
    with torch.no_grad():
        post = model.posterior(_nchw(np.stack([source, target])))
        occ = D.harden(post.occ_probs[1:], model.cfg.eval_threshold)
        app = post.app_mu[1:].clone()
        original = model.decode(assemble(occ, app).zhat)
        app[0, target_part] = post.app_mu[0, source_part]
        swapped = model.decode(assemble(occ, app).zhat)
    to_img = lambda t: t[0].permute(1, 2, 0).numpy()  # noqa: E731
    return to_img(original), to_img(swapped), occ[0, target_part].numpy()


def swap_locality(original: np.ndarray, swapped: np.ndarray, occ_map: np.ndarray) -> tuple[float, float]:
    """Mean absolute pixel change inside vs outside the cells where the part occurs."""
    delta = np.abs(swapped - original).mean(axis=-1)
    inside = upsample_nearest(occ_map).astype(bool)
    if inside.all() or not inside.any():
        raise ValueError("occurrence map must mark some but not all cells")
    return float(delta[inside].mean()), float(delta[~inside].mean())


def weight_mask_panel(images: np.ndarray) -> np.ndarray:
    """Rows: images, Laplacian magnitude, weight masks, image x mask."""
    x = _nchw(images)
    lap = laplacian_energy(x)[:, 0].numpy()
    masks = laplacian_weight_mask(x).numpy()
    up = upsample_nearest(masks)
    rows = [[], [], [], []]
    for j in range(len(images)):
        img = denormalize(images[j])
        l = lap[j] / lap[j].max() if lap[j].max() > 0 else lap[j]
        m = up[j] / up[j].max()
        rows[0].append(img)
        rows[1].append(np.repeat(np.rint(l * 255).astype(np.uint8)[..., None], 3, -1))
        rows[2].append(np.repeat(np.rint(m * 255).astype(np.uint8)[..., None], 3, -1))
        rows[3].append(np.rint(img * m[..., None]).astype(np.uint8))
    return tile(rows)


def save_png(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def emit_plots(history_csv, out_dir) -> tuple[Path, Path]:
    """Loss-term curves and the temperature trace from a training history CSV."""
    rows = read_history_csv(history_csv)
    if not rows:
        raise ValueError(f"{history_csv}: history has no rows; nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in rows]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key, unit in zip(axes, ("recon", "kl_occ", "kl_app"), ("MSE per pixel", "nats / image", "nats / image")):
        ax.plot(steps, [r[key] for r in rows])
        ax.set_xlabel("step")
        ax.set_ylabel(f"{key} loss ({unit})")
        ax.set_title(key)
    fig.tight_layout()
    loss_path = out_dir / "loss_curves.png"
    fig.savefig(loss_path, dpi=80)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [r["tau"] for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("temperature tau (dimensionless)")
    ax.set_title("relaxed-Bernoulli temperature")
    fig.tight_layout()
    tau_path = out_dir / "temperature.png"
    fig.savefig(tau_path, dpi=80)
    plt.close(fig)
    return loss_path, tau_path
