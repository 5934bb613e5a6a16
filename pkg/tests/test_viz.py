import numpy as np
import pytest
import torch

from patchvae.data import SynthSpec, make_synthetic
from patchvae.model import PatchVAE
from patchvae.trainer import write_history_csv
from patchvae.viz import (crop_cell, emit_plots, overlay, swap_appearance, tile, top_crops, viz_parts,
                          weight_mask_panel)


@pytest.fixture
def model(tiny_cfg):
    torch.manual_seed(0)
    return PatchVAE(tiny_cfg).eval()


@pytest.fixture
def images():
    ds, _, _ = make_synthetic(SynthSpec(count=6, canvas=16, motif_count=2, motifs_per_image=1))
    return ds.images


def test_half_probability_overlay_is_uniform(model, images):
    with torch.no_grad():
        model.occ_head.weight.zero_()
        model.occ_head.bias.zero_()
    flat = np.zeros((2, 16, 16, 3), np.float32)
    panel, maps = viz_parts(model, flat, [0, 3])
    assert maps.shape == (2, 2, 16, 16) and np.allclose(maps, 0.5)
    cell = overlay(flat[0], maps[0, 0])
    assert (cell == cell[0, 0]).all()
    assert tuple(cell[0, 0]) == (128, 64, 64)
    assert panel.shape == (2 * 18 + 2, 2 * 18 + 2, 3)


def test_viz_rejects_bad_part(model, images):
    with pytest.raises(IndexError):
        viz_parts(model, images, [9])


def test_top_crops_sorted_and_argmax(model, images):
    crops = top_crops(model, images, part=1, k=5)
    scores = [c.score for c in crops]
    assert scores == sorted(scores, reverse=True)
    best = top_crops(model, images, part=1, k=1)[0]
    assert best.score == scores[0] and best.pixels.shape == (16, 16, 3)


def test_top_crops_short_dataset_warns(model, images, caplog):
    crops = top_crops(model, images[:1], part=0, k=50)
    assert len(crops) == 4 and "only 4" in caplog.text


def test_crop_cell_padding():
    img = np.ones((16, 16, 3), np.float32)
    c = crop_cell(img, 0, 0, 16)
    assert c[:4].sum() == 0 and c[4:, 4:].min() == 1


def test_self_swap_is_identity(model, images):
    original, swapped, occ = swap_appearance(model, images[0], 2, images[0], 2)
    assert np.array_equal(original, swapped) and occ.shape == (2, 2)


def test_tile_layout():
    t = tile([[np.zeros((4, 4, 3), np.uint8)] * 3, [np.zeros((4, 4, 3), np.uint8)]])
    assert t.shape == (2 * 6 + 2, 3 * 6 + 2, 3)


def test_weight_mask_panel_shape(images):
    assert weight_mask_panel(images[:3]).shape == (4 * 18 + 2, 3 * 18 + 2, 3)


def test_emit_plots(tmp_path):
    hist = [{"step": i, "recon": 1 / (i + 1), "kl_occ": 1.0, "kl_app": 2.0, "total": 0.0, "tau": 1.0} for i in range(5)]
    write_history_csv(hist, tmp_path / "h.csv")
    a, b = emit_plots(tmp_path / "h.csv", tmp_path)
    assert a.stat().st_size > 0 and b.stat().st_size > 0


def test_emit_plots_empty_history(tmp_path):
    write_history_csv([], tmp_path / "h.csv")
    with pytest.raises(ValueError, match="no rows"):
        emit_plots(tmp_path / "h.csv", tmp_path / "out")
    assert not (tmp_path / "out").exists()
