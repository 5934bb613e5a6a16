"""``pvae <subcommand> --config FILE [--set key=value]... --out DIR``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import (first_per_class, load_cifar_binary, load_image_folder, load_synthetic, make_synthetic,
                   save_synthetic)
from .metrics import psnr, ssim
from .model import PatchVAE
from .trainer import TrainState, train, write_history_csv

log = logging.getLogger("pvae")

SUBCOMMANDS = ("train", "probe", "viz-parts", "crops", "swap", "recon-metrics", "gradcheck", "make-synth", "sweep")


def load_datasets(cfg: C.RunConfig, need_test: bool = False):
    """(train, test-or-None) datasets described by the ``data`` section."""
    d = cfg.data
    if d.kind == "synthetic":
        if d.path:
            train_ds, _, _ = load_synthetic(d.path)
        else:
            train_ds, _, _ = make_synthetic(cfg.synth)
        test_ds = None
        if need_test:
            if d.test_path:
                test_ds, _, _ = load_synthetic(d.test_path)
            else:
                spec = dataclasses.replace(cfg.synth, seed=cfg.synth.seed + 1, count=max(cfg.synth.count // 5, 1))
                test_ds, _, _ = make_synthetic(spec)
                test_ds.split = "test"
    elif d.kind == "cifar":
        train_ds = load_cifar_binary(d.path, "train")
        test_ds = load_cifar_binary(d.test_path or d.path, "test") if need_test else None
    elif d.kind == "folder":
        size = d.size or cfg.model.H
        train_ds = load_image_folder(d.path, size)
        test_ds = load_image_folder(d.test_path, size, "test") if need_test and d.test_path else None
        if need_test and test_ds is None:
            raise SystemExit("data.test_path is required for a folder dataset probe")
    else:
        raise SystemExit(f"unknown data.kind {d.kind!r} (synthetic, cifar, folder)")
    if d.limit:
        train_ds = first_per_class(train_ds, d.limit)
    if test_ds is not None and d.test_limit:
        test_ds = first_per_class(test_ds, d.test_limit)
    return train_ds, test_ds


def _checkpoint(cfg: C.RunConfig):
    if not cfg.checkpoint:
        raise SystemExit("this subcommand needs a checkpoint (--checkpoint PATH or checkpoint=PATH)")
    return load_checkpoint(cfg.checkpoint)


def _patch_model(cfg: C.RunConfig) -> PatchVAE:
    model = restore_model(_checkpoint(cfg))
    if not isinstance(model, PatchVAE):
        raise SystemExit("this subcommand needs a PatchVAE checkpoint")
    return model


def cmd_make_synth(cfg, out: Path):
    ds, occ, bank = make_synthetic(cfg.synth)
    save_synthetic(out / "synthetic.npz", cfg.synth, ds, occ, bank)
    print(f"wrote {len(ds)} synthetic images to {out / 'synthetic.npz'}")


def cmd_train(cfg, out: Path):
    from .viz import emit_plots

    train_ds, _ = load_datasets(cfg)
    if cfg.checkpoint:
        state = TrainState.from_checkpoint(load_checkpoint(cfg.checkpoint))
    else:
        state = cfg.model
    state = train(state, train_ds, cfg.train, out_dir=out)
    save_checkpoint(state.to_checkpoint(cfg.train), out / "final.pvae")
    write_history_csv(state.history, out / "history.csv")
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "recon", "kl_occ", "kl_app", "total"])
        w.writeheader()
        w.writerows(state.epoch_history)
    if state.history:
        emit_plots(out / "history.csv", out)
    for e in state.epoch_history:
        print(f"epoch {e['epoch']}: total {e['total']:.5f} recon {e['recon']:.5f} "
              f"kl_occ {e['kl_occ']:.3f} kl_app {e['kl_app']:.3f}")


def cmd_probe(cfg, out: Path):
    from .probe import build_classifier, train_probe

    train_ds, test_ds = load_datasets(cfg, need_test=True)
    pc = dataclasses.replace(cfg.probe, num_classes=max(train_ds.num_classes, test_ds.num_classes))
    if cfg.random_init:
        clf = build_classifier(None, pc, cfg.model, train_ds.images.shape[1:3])
    else:
        clf = build_classifier(_checkpoint(cfg), pc, image_size=train_ds.images.shape[1:3])
    report = train_probe(clf, train_ds, test_ds, pc)
    report.to_csv(out / "probe_report.csv")
    (out / "probe_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")


def cmd_viz_parts(cfg, out: Path):
    from .viz import save_png, viz_parts

    model = _patch_model(cfg)
    ds, _ = load_datasets(cfg)
    parts = [int(p) for p in cfg.viz.parts.split(",") if p.strip()] or None
    panel, _ = viz_parts(model, ds.images[: cfg.viz.samples], parts)
    print(f"wrote {save_png(panel, out / 'parts.png')}")


def cmd_crops(cfg, out: Path):
    from .viz import crops_panel, occurrence_probs, save_png, top_crops

    model = _patch_model(cfg)
    ds, _ = load_datasets(cfg)
    probs = occurrence_probs(model, ds.images)
    parts = [cfg.viz.part] if cfg.viz.part >= 0 else range(model.cfg.N)
    with open(out / "crops.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part", "rank", "image", "row", "col", "score"])
        for part in parts:
            crops = top_crops(model, ds, part, cfg.viz.k, cfg.viz.crop, probs=probs)
            for rank, c in enumerate(crops):
                w.writerow([part, rank, c.image_index, c.row, c.col, f"{c.score:.6f}"])
            save_png(crops_panel(crops), out / f"crops_part{part:02d}.png")
    print(f"wrote crops for {len(list(parts))} part(s) to {out}")


def cmd_swap(cfg, out: Path):
    from .data import denormalize
    from .viz import save_png, swap_appearance, tile

    model = _patch_model(cfg)
    ds, _ = load_datasets(cfg)
    v = cfg.viz
    src, tgt = ds.images[v.source], ds.images[v.target]
    original, swapped, _ = swap_appearance(model, src, v.source_part, tgt, v.target_part)
    panel = tile([[denormalize(src), denormalize(tgt), denormalize(original), denormalize(swapped)]])
    print(f"wrote {save_png(panel, out / 'swap.png')}")


def cmd_recon_metrics(cfg, out: Path):
    model = restore_model(_checkpoint(cfg))
    ds, _ = load_datasets(cfg)
    images = ds.images[: cfg.viz.samples] if cfg.viz.samples > 0 else ds.images
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    with torch.no_grad():
        x_hat = model(x).x_hat.permute(0, 2, 3, 1).numpy()
    p, s = psnr(images, x_hat), ssim(images, x_hat)
    with open(out / "recon_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_kind", "images", "psnr_db", "ssim"])
        w.writerow([model.cfg.model_kind, len(images), f"{p:.6f}", f"{s:.6f}"])
    print(f"{model.cfg.model_kind}: PSNR {p:.3f} dB, SSIM {s:.4f} over {len(images)} images")


def cmd_gradcheck(cfg, out: Path) -> int:
    from .gradcheck import certify_all

    reports = certify_all(seed=cfg.train.seed)
    lines = [f"{name}: {rep}" for name, rep in reports.items()]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_sweep(cfg, out: Path):
    from .sweep import run_sweep

    train_ds, test_ds = load_datasets(cfg, need_test=True)
    pc = dataclasses.replace(cfg.probe, num_classes=max(train_ds.num_classes, test_ds.num_classes))
    probe_cfg = pc if cfg.probe.epochs > 0 else None
    rows = run_sweep(cfg.model, cfg.train, train_ds, probe_cfg, test_ds, out / "sweep.csv")
    print(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")


HANDLERS = {
    "train": cmd_train,
    "probe": cmd_probe,
    "viz-parts": cmd_viz_parts,
    "crops": cmd_crops,
    "swap": cmd_swap,
    "recon-metrics": cmd_recon_metrics,
    "gradcheck": cmd_gradcheck,
    "make-synth": cmd_make_synth,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvae", description="PatchVAE training, probing and visualization")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="flat key=value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    ap.add_argument("--checkpoint", help="shorthand for --set checkpoint=PATH")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.checkpoint:
        overrides.append(f"checkpoint={args.checkpoint}")
    try:
        cfg = C.load_config(args.config, overrides)
    except (C.ConfigKeyError, ValueError) as err:
        print(f"pvae: config error: {err}", file=sys.stderr)
        return 2
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(C.dump(cfg))
    rc = HANDLERS[args.subcommand](cfg, out)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
