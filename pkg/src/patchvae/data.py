"""Datasets: CIFAR binary batches, image folders, and synthetic repeated motifs.

Images are stored as float32 arrays of shape (count, H, W, 3) in [-1, 1].
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CIFAR_PIXELS = 3072
SYNTH_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    class_names: list[str] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DataError(f"images must be (count, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in count")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, list(self.class_names))


def normalize(pixels: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1], exactly 2 * p / 255 - 1."""
    return (2.0 * (pixels.astype(np.float32) / 255.0) - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------- CIFAR

_CIFAR100 = {"train": ["train.bin"], "test": ["test.bin"]}
_CIFAR10 = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}


def _read_records(path: Path, label_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    record = label_bytes + CIFAR_PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise DataError(f"{path}: empty file")
    whole, rest = divmod(raw.size, record)
    if rest:
        raise DataError(
            f"{path}: truncated record at byte offset {whole * record} "
            f"({rest} of {record} bytes present)"
        )
    recs = raw.reshape(whole, record)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    pixels = recs[:, label_bytes:].reshape(whole, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels, labels


def _detect_label_bytes(path: Path) -> int:
    size = path.stat().st_size
    fits10, fits100 = size % 3073 == 0, size % 3074 == 0
    if fits10 and not fits100:
        return 1
    if fits100 and not fits10:
        return 2
    if fits10 and fits100:
        raise DataError(f"{path}: size {size} is ambiguous between 1- and 2-label-byte records")
    raise DataError(f"{path}: size {size} is not a whole number of CIFAR records")


def load_cifar_binary(path, split: str = "train", label_bytes: int | None = None) -> Dataset:
    """Load a CIFAR binary split.

    ``path`` is either one .bin file or a directory holding the standard file
    names (CIFAR-100 ``train.bin``/``test.bin`` with coarse+fine label bytes,
    or CIFAR-10 ``data_batch_*.bin``/``test_batch.bin`` with one label byte).
    For two label bytes the fine label is used.
    """
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    path = Path(path)
    if path.is_dir():
        if all((path / f).exists() for f in _CIFAR100[split]):
            files, lb = [path / f for f in _CIFAR100[split]], 2
        elif all((path / f).exists() for f in _CIFAR10[split]):
            files, lb = [path / f for f in _CIFAR10[split]], 1
        else:
            raise DataError(f"{path}: no CIFAR {split} files found")
        label_bytes = label_bytes or lb
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        lb = label_bytes or _detect_label_bytes(f)
        px, lab = _read_records(f, lb)
        images.append(px)
        labels.append(lab)
    pixels = np.concatenate(images)
    return Dataset(normalize(pixels), np.concatenate(labels), split)


def write_cifar_binary(path, pixels: np.ndarray, labels: np.ndarray, coarse: np.ndarray | None = None) -> None:
    """Write uint8 (count, 32, 32, 3) pixels in CIFAR record layout (one label byte, or two with ``coarse``)."""
    planar = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), CIFAR_PIXELS)
    cols = [labels.astype(np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, coarse.astype(np.uint8)[:, None])
    np.concatenate(cols + [planar.astype(np.uint8)], axis=1).tofile(path)


def first_per_class(ds: Dataset, k: int) -> Dataset:
    """The first ``k`` records of every class, in original order."""
    keep = np.zeros(len(ds), dtype=bool)
    seen: dict[int, int] = {}
    for i, y in enumerate(ds.labels):
        if seen.get(int(y), 0) < k:
            keep[i] = True
            seen[int(y)] = seen.get(int(y), 0) + 1
    return ds.subset(np.flatnonzero(keep))


# ------------------------------------------------------------ image folders

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def resize_center_crop(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    img = img.resize((nw, nh), Image.BILINEAR)
    left, top = (nw - size) // 2, (nh - size) // 2
    return img.crop((left, top, left + size, top + size))


def load_image_folder(path, size: int, split: str = "train") -> Dataset:
    """One subdirectory per class, labels in sorted-name order."""
    root = Path(path)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataError(f"{root}: no class subdirectories")
    images, labels, skipped = [], [], 0
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        count = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    img = resize_center_crop(im.convert("RGB"), size)
            except (OSError, ValueError) as err:
                log.warning("skipping undecodable image %s: %s", f, err)
                skipped += 1
                continue
            images.append(np.asarray(img, dtype=np.uint8))
            labels.append(label)
            count += 1
        if count == 0:
            raise DataError(f"class {name!r} has no decodable images")
    ds = Dataset(normalize(np.stack(images)), np.array(labels), split, classes, skipped)
    return ds


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    count: int = 2000
    canvas: int = 32
    motif_count: int = 4
    motif_size: int = 8
    motifs_per_image: int = 2
    noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.motif_size % 8 or self.motif_size < 8:
            raise DataError("motif size must be a positive multiple of 8")
        if self.canvas % self.motif_size:
            raise DataError("canvas must be a multiple of the motif size")
        if self.motifs_per_image > self.slots:
            raise DataError(
                f"{self.motifs_per_image} motifs per image exceed grid capacity of {self.slots} slots"
            )
        if self.motifs_per_image < 0 or self.motif_count < 1 or self.count < 0:
            raise DataError("invalid synthetic spec counts")

    @property
    def slots(self) -> int:
        return (self.canvas // self.motif_size) ** 2

    @property
    def grid(self) -> int:
        return self.canvas // 8


def make_motif_bank(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """High-contrast two-colour patterns, (motif_count, s, s, 3) in [-1, 1]."""
    s = spec.motif_size
    bank = np.empty((spec.motif_count, s, s, 3), dtype=np.float32)
    for m in range(spec.motif_count):
        cells = rng.random((4, 4)) < 0.5
        pattern = np.kron(cells, np.ones((s // 4, s // 4), dtype=bool))
        fg = rng.uniform(0.3, 1.0, 3) * rng.choice([-1, 1], 3)
        fg[rng.integers(3)] = rng.choice([-1.0, 1.0])
        bank[m] = np.where(pattern[..., None], fg, -fg)
    return bank


def place_motifs(canvas: np.ndarray, occupancy: np.ndarray, bank: np.ndarray,
                 placements: list[tuple[int, int, int]]) -> None:
    """Paste motifs at (motif, row, col) pixel offsets and mark the covered grid cells."""
    s = bank.shape[1]
    for m, r, c in placements:
        canvas[r : r + s, c : c + s] = bank[m]
        occupancy[r // 8 : (r + s) // 8, c // 8 : (c + s) // 8, m] = 1


def make_synthetic(spec: SynthSpec) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Noise images with motifs pasted at grid-aligned slots.

    Returns the dataset (label = id of the first pasted motif, or 0 when
    there are none), occupancy ``(count, h, w, motif_count)`` and the motif bank.
    """
    rng = np.random.default_rng(spec.seed)
    bank = make_motif_bank(spec, rng)
    n, s, g = spec.count, spec.motif_size, spec.grid
    per_side = spec.canvas // s
    images = rng.uniform(-spec.noise, spec.noise, (n, spec.canvas, spec.canvas, 3)).astype(np.float32)
    occupancy = np.zeros((n, g, g, spec.motif_count), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        slots = rng.choice(spec.slots, size=spec.motifs_per_image, replace=False)
        motifs = rng.integers(spec.motif_count, size=spec.motifs_per_image)
        placements = [(int(m), int(k // per_side) * s, int(k % per_side) * s) for m, k in zip(motifs, slots)]
        place_motifs(images[i], occupancy[i], bank, placements)
        if placements:
            labels[i] = placements[0][0]
    names = [f"motif{m}" for m in range(spec.motif_count)]
    return Dataset(images, labels, "train", names), occupancy, bank


def save_synthetic(path, spec: SynthSpec, ds: Dataset, occupancy: np.ndarray, bank: np.ndarray) -> None:
    manifest = {"format": "patchvae-synthetic", "version": SYNTH_FORMAT_VERSION, "spec": asdict(spec)}
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest, sort_keys=True)), images=ds.images,
                 labels=ds.labels, occupancy=occupancy, bank=bank)


def load_synthetic(path) -> tuple[Dataset, np.ndarray, SynthSpec]:
    with np.load(path) as z:
        manifest = json.loads(str(z["manifest"]))
        if manifest.get("format") != "patchvae-synthetic" or manifest.get("version") != SYNTH_FORMAT_VERSION:
            raise DataError(f"{path}: not a version-{SYNTH_FORMAT_VERSION} synthetic dataset")
        spec = SynthSpec(**manifest["spec"])
        names = [f"motif{m}" for m in range(spec.motif_count)]
        return Dataset(z["images"], z["labels"], "train", names), z["occupancy"], spec


# ---------------------------------------------------------------- batching


def num_batches(count: int, batch_size: int) -> int:
    return -(-count // batch_size)


def batch_order(count: int, shuffle_seed: int | None) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(count)
    return np.random.default_rng(shuffle_seed).permutation(count)


def minibatches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One pass over ``ds``; the last batch may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = batch_order(len(ds), shuffle_seed)
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def dataset_from_env(var: str) -> Path | None:
    value = os.environ.get(var)
    return Path(value) if value else None
