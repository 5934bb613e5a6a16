"""Downstream classification probe on top of the pretrained trunk."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .data import Dataset, minibatches
from .model import ModelConfig
from .nn import Trunk, init_weights

log = logging.getLogger(__name__)

FREEZE_LEVELS = {"none": 0, "conv1": 1, "conv1_3": 2, "conv1_5": 3}


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    freeze_level: str = "conv1_5"
    hidden: int = 512
    num_classes: int = 100
    lr: float = 1e-2
    momentum: float = 0.9
    decay_every: int = 30
    decay_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.freeze_level not in FREEZE_LEVELS:
            raise ProbeError(f"freeze_level must be one of {sorted(FREEZE_LEVELS)}, got {self.freeze_level!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ProbeError(f"unknown probe config keys: {sorted(unknown)}")
        return cls(**d)


PROBE_PRESETS = {
    "desk": dict(epochs=30),
    "cifar100": dict(epochs=90, num_classes=100),
    "indoor67": dict(epochs=90, num_classes=67),
    "places205": dict(epochs=5, num_classes=205),
}


class Classifier(nn.Module):
    """Trunk, then FC(hidden) + ReLU, then FC(num_classes)."""

    def __init__(self, model_cfg: ModelConfig, cfg: ProbeConfig):
        super().__init__()
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.trunk = Trunk(model_cfg.stem_channels, model_cfg.d_e)
        self.fc1 = nn.Linear(model_cfg.d_e * model_cfg.L, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.num_classes)
        init_weights(self)
        self.freeze(cfg.freeze_level)

    @property
    def frozen_count(self) -> int:
        return FREEZE_LEVELS[self.cfg.freeze_level]

    def freeze(self, level: str) -> None:
        n = FREEZE_LEVELS[level]
        for i, stage in enumerate(self.trunk.stages()):
            for p in stage.parameters():
                p.requires_grad_(i >= n)

    def frozen_stages(self) -> list[nn.Module]:
        return self.trunk.stages()[: self.frozen_count]

    def trainable_stages(self) -> list[nn.Module]:
        return self.trunk.stages()[self.frozen_count :]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen layers keep their running batchnorm statistics
        for stage in self.frozen_stages():
            stage.eval()
        return self

    def frozen_features(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.frozen_stages():
            x = stage(x)
        return x

    def head(self, f: torch.Tensor) -> torch.Tensor:
        for stage in self.trainable_stages():
            f = stage(f)
        return self.fc2(torch.relu(self.fc1(f.flatten(1))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.frozen_features(x))


def build_classifier(checkpoint: Checkpoint | None, cfg: ProbeConfig, model_cfg: ModelConfig | None = None,
                     image_size: tuple[int, int] | None = None) -> Classifier:
    """Classifier over the checkpoint's trunk, or a random-init trunk when ``checkpoint`` is None."""
    if checkpoint is not None:
        model_cfg = checkpoint.model_config
    if model_cfg is None:
        raise ProbeError("need a checkpoint or a model config")
    if image_size is not None and tuple(image_size) != (model_cfg.H, model_cfg.W):
        raise ProbeError(f"probe images are {image_size}, trunk was trained on {model_cfg.H}x{model_cfg.W}")
    torch.manual_seed(cfg.seed)
    clf = Classifier(model_cfg, cfg)
    if checkpoint is not None:
        state = {}
        for group in ("param", "buffer"):
            for k, v in checkpoint.group(group).items():
                if k.startswith("trunk."):
                    state[k[len("trunk."):]] = torch.from_numpy(v.copy())
        clf.trunk.load_state_dict(state, strict=True)
    return clf


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    train_loss: list[float] = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        w.writerow(["top1", f"{self.top1:.4f}"])
        w.writerow(["top5", f"{self.top5:.4f}"])
        for c, acc in enumerate(self.per_class):
            w.writerow([f"class_{c}", f"{acc:.4f}"])
        for k, v in sorted(self.config.items()):
            w.writerow([f"config.{k}", v])
        text = buf.getvalue()
        if path:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        lines = [f"top-1 accuracy: {self.top1:.2f}%", f"top-5 accuracy: {self.top5:.2f}%"]
        lines += [f"  {k} = {v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


def _features(clf: Classifier, ds: Dataset, batch: int = 256) -> torch.Tensor:
    clf.eval()
    out = []
    with torch.no_grad():
        for xb, _ in minibatches(ds, batch):
            x = torch.from_numpy(np.ascontiguousarray(xb.transpose(0, 3, 1, 2)))
            out.append(clf.frozen_features(x))
    return torch.cat(out)


def evaluate(clf: Classifier, ds: Dataset, feats: torch.Tensor | None = None) -> tuple[float, float, list[float]]:
    if feats is None:
        feats = _features(clf, ds)
    clf.eval()
    with torch.no_grad():
        logits = torch.cat([clf.head(feats[i : i + 512]) for i in range(0, len(feats), 512)])
    y = torch.from_numpy(ds.labels)
    k = min(5, logits.shape[1])
    topk = logits.topk(k, dim=1).indices
    hit1 = topk[:, 0] == y
    hit5 = (topk == y[:, None]).any(dim=1)
    per_class = []
    for c in range(clf.cfg.num_classes):
        sel = y == c
        per_class.append(float(hit1[sel].float().mean() * 100) if sel.any() else float("nan"))
    return float(hit1.float().mean() * 100), float(hit5.float().mean() * 100), per_class


def train_probe(clf: Classifier, train_ds: Dataset, test_ds: Dataset, cfg: ProbeConfig | None = None) -> EvalReport:
    """SGD with momentum and step decay; reports accuracy on ``test_ds``.

    Outputs of the frozen stages are computed once up front (eval-mode
    batchnorm, so they are fixed for the whole run).
    """
    cfg = cfg or clf.cfg
    mc = clf.model_cfg
    for ds in (train_ds, test_ds):
        if ds.images.shape[1:3] != (mc.H, mc.W):
            raise ProbeError(f"dataset resolution {ds.images.shape[1:3]} != trunk {mc.H}x{mc.W}")
        if len(ds.labels) and (ds.labels.min() < 0 or ds.labels.max() >= cfg.num_classes):
            raise ProbeError(f"labels outside [0, {cfg.num_classes})")
    train_feats = _features(clf, train_ds)
    test_feats = _features(clf, test_ds)
    y_all = torch.from_numpy(train_ds.labels)
    params = [p for p in clf.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.decay_factor)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        clf.train()
        order = torch.from_numpy(rng.permutation(len(train_feats)))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = F.cross_entropy(clf.head(train_feats[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"probe loss is not finite at epoch {epoch}, batch {start // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        sched.step()
        losses.append(total / max(n, 1))
        log.debug("probe epoch %d loss %.4f", epoch, losses[-1])
    top1, top5, per_class = evaluate(clf, test_ds, test_feats)
    return EvalReport(top1, top5, per_class, asdict(cfg), losses)
