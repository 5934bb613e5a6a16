"""Layer substrate and gradient certification.

Layers are described by ``LayerSpec`` using the appendix notation
``(kernel x kernel, channels, stride, pad)`` and realized as torch modules.
Tensors inside the network are batch x channels x height x width; images
at the data boundary are height x width x channels (see ``to_nchw``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

INIT_SCHEME = "normal(0, sqrt(2/fan_in))/bn_1_0/bias_0"

LAYER_KINDS = (
    "identity",
    "conv",
    "deconv",
    "batchnorm",
    "relu",
    "leakyrelu",
    "tanh",
    "sigmoid",
    "fc",
    "maxpool",
    "residual",
    "flatten",
)


class ShapeError(ValueError):
    """Input does not fit a layer; the message names the layer."""


class DetachedError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int | None = None
    kernel: int | tuple[int, int] = 1
    stride: int = 1
    pad: int = 0
    slope: float = 0.2
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "deconv", "fc", "residual") and not self.channels:
            raise ValueError(f"{self.kind} layer needs a channel count")

    def __str__(self):
        k = self.kernel if isinstance(self.kernel, tuple) else (self.kernel, self.kernel)
        if self.kind in ("conv", "deconv"):
            return f"{self.kind}({k[0]}x{k[1]}, {self.channels}, {self.stride}, {self.pad})"
        if self.kind == "maxpool":
            return f"maxpool({k[0]}x{k[1]}, {self.stride}, {self.pad})"
        if self.kind == "leakyrelu":
            return f"leakyrelu({self.slope})"
        if self.kind in ("fc", "residual"):
            return f"{self.kind}({self.channels})"
        return self.kind


def conv(kernel, channels, stride=1, pad=0, bias=False) -> LayerSpec:
    return LayerSpec("conv", channels, kernel, stride, pad, bias=bias)


def deconv(kernel, channels, stride=1, pad=0, bias=False) -> LayerSpec:
    return LayerSpec("deconv", channels, kernel, stride, pad, bias=bias)


def _pair(k):
    return k if isinstance(k, tuple) else (k, k)


def effective_fan_in(m: nn.Module) -> float:
    """Inputs feeding one output unit; a strided deconv sees only 1/stride^2 of its taps."""
    if isinstance(m, nn.Linear):
        return m.in_features
    k = m.kernel_size[0] * m.kernel_size[1]
    if isinstance(m, nn.ConvTranspose2d):
        taps = max(1.0, k / (m.stride[0] * m.stride[1]))
        return m.in_channels * taps
    return m.in_channels // m.groups * k


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal weights, unit/zero batchnorm, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            std = math.sqrt(2.0 / effective_fan_in(m))
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    """conv-BN-ReLU-conv-BN plus shortcut, then ReLU.

    The shortcut is the identity unless the block changes channel count or
    stride, in which case it is a 1x1 conv followed by batchnorm.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, 0, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def build_layer(spec: LayerSpec, in_channels: int) -> tuple[nn.Module, int]:
    """Return the module for ``spec`` and the channel count it emits."""
    k = _pair(spec.kernel)
    kind = spec.kind
    if kind == "identity":
        return nn.Identity(), in_channels
    if kind == "conv":
        return nn.Conv2d(in_channels, spec.channels, k, spec.stride, spec.pad, bias=spec.bias), spec.channels
    if kind == "deconv":
        return (
            nn.ConvTranspose2d(in_channels, spec.channels, k, spec.stride, spec.pad, bias=spec.bias),
            spec.channels,
        )
    if kind == "batchnorm":
        return nn.BatchNorm2d(in_channels), in_channels
    if kind == "relu":
        return nn.ReLU(), in_channels
    if kind == "leakyrelu":
        return nn.LeakyReLU(spec.slope), in_channels
    if kind == "tanh":
        return nn.Tanh(), in_channels
    if kind == "sigmoid":
        return nn.Sigmoid(), in_channels
    if kind == "maxpool":
        return nn.MaxPool2d(k, spec.stride, spec.pad), in_channels
    if kind == "fc":
        return nn.Linear(in_channels, spec.channels, bias=True), spec.channels
    if kind == "residual":
        return ResidualBlock(in_channels, spec.channels, spec.stride), spec.channels
    if kind == "flatten":
        return nn.Flatten(), in_channels
    raise ValueError(kind)


def _expected_in(module: nn.Module) -> int | None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        return module.in_channels
    if isinstance(module, nn.BatchNorm2d):
        return module.num_features
    if isinstance(module, nn.Linear):
        return module.in_features
    if isinstance(module, ResidualBlock):
        return module.in_channels
    return None


class LayerStack(nn.Module):
    """Ordered stack of layers built from specs, with per-layer shape checks."""

    def __init__(self, specs: Sequence[LayerSpec], in_channels: int):
        super().__init__()
        self.specs = list(specs)
        self.in_channels = in_channels
        layers = []
        ch = in_channels
        for spec in self.specs:
            layer, ch = build_layer(spec, ch)
            layers.append(layer)
        self.layers = nn.ModuleList(layers)
        self.out_channels = ch
        init_weights(self)

    def forward(self, x):
        for i, (spec, layer) in enumerate(zip(self.specs, self.layers)):
            expected = _expected_in(layer)
            got = x.shape[-1] if isinstance(layer, nn.Linear) else (x.shape[1] if x.dim() > 1 else None)
            if expected is not None and got != expected:
                raise ShapeError(
                    f"layer {i} [{spec}]: expected {expected} input channels/features, "
                    f"got input of shape {tuple(x.shape)}"
                )
            try:
                x = layer(x)
            except RuntimeError as err:
                raise ShapeError(f"layer {i} [{spec}]: {err}") from err
        return x


def forward(stack: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return stack(x)


def output_shape(specs: Iterable[LayerSpec], shape: Sequence[int]) -> tuple[int, ...]:
    """Shape arithmetic for a (channels, height, width) input, no tensors involved."""
    c, h, w = shape
    flat = None
    for spec in specs:
        kh, kw = _pair(spec.kernel)
        if spec.kind == "conv" or spec.kind == "maxpool":
            h = (h + 2 * spec.pad - kh) // spec.stride + 1
            w = (w + 2 * spec.pad - kw) // spec.stride + 1
            if spec.kind == "conv":
                c = spec.channels
        elif spec.kind == "deconv":
            h = (h - 1) * spec.stride - 2 * spec.pad + kh
            w = (w - 1) * spec.stride - 2 * spec.pad + kw
            c = spec.channels
        elif spec.kind == "residual":
            h = (h - 1) // spec.stride + 1
            w = (w - 1) // spec.stride + 1
            c = spec.channels
        elif spec.kind == "flatten":
            flat = c * h * w
        elif spec.kind == "fc":
            flat = spec.channels
        if h < 1 or w < 1:
            raise ShapeError(f"layer [{spec}] reduces spatial extent below 1")
    return (flat,) if flat is not None else (c, h, w)


def resnet9_specs(stem_channels: int = 64, out_channels: int = 128) -> dict[str, list[LayerSpec]]:
    """Feature trunk grouped as conv1 / conv2_3 / conv4_5.

    conv1 and its max pool divide resolution by 4; the first residual block
    of conv4_5 divides it by 2 again, so H x W maps to H/8 x W/8.
    """
    return {
        "conv1": [
            conv(7, stem_channels, 2, 3),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=3, stride=2, pad=1),
        ],
        "conv2_3": [
            LayerSpec("residual", stem_channels),
            LayerSpec("residual", stem_channels),
        ],
        "conv4_5": [
            LayerSpec("residual", out_channels, stride=2),
            LayerSpec("residual", out_channels),
        ],
    }


class Trunk(nn.Module):
    """The deterministic feature extractor; stages exposed for freezing."""

    stage_names = ("conv1", "conv2_3", "conv4_5")

    def __init__(self, stem_channels: int = 64, out_channels: int = 128, in_channels: int = 3):
        super().__init__()
        specs = resnet9_specs(stem_channels, out_channels)
        self.conv1 = LayerStack(specs["conv1"], in_channels)
        self.conv2_3 = LayerStack(specs["conv2_3"], stem_channels)
        self.conv4_5 = LayerStack(specs["conv4_5"], stem_channels)
        self.out_channels = out_channels

    def stages(self):
        return [self.conv1, self.conv2_3, self.conv4_5]

    def forward(self, x):
        return self.conv4_5(self.conv2_3(self.conv1(x)))


def to_nchw(images) -> torch.Tensor:
    """N x H x W x C array (or tensor) to an N x C x H x W tensor."""
    t = torch.as_tensor(np.asarray(images)) if not torch.is_tensor(images) else images
    return t.permute(0, 3, 1, 2).contiguous()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------- gradients


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. every trainable parameter of ``model``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not loss.requires_grad:
        if getattr(loss, "_detached_from_graph", False):
            raise DetachedError("loss is detached from the computation graph")
        # a constant loss: every gradient is zero
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


def detach(t: torch.Tensor) -> torch.Tensor:
    """Detach ``t`` and mark it so ``backward`` refuses it."""
    out = t.detach()
    out._detached_from_graph = True
    return out


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL " + ", ".join(self.failing)
        return f"gradcheck {status} (max rel err {self.max_error:.3e}, tol {self.tolerance:g}, {len(self.errors)} params)"


def finite_difference_check(
    model: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    grad_fn: Callable[[nn.Module], dict[str, torch.Tensor]] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, element by element.

    ``loss_fn(model)`` must be deterministic. ``grad_fn`` overrides the analytic
    route (defaults to autograd through ``backward``). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    report = GradCheckReport(tolerance)
    if not named:
        return report
    if any(p.dtype != torch.float64 for _, p in named):
        raise TypeError("finite_difference_check requires float64 parameters")

    loss = loss_fn(model)
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"loss is not finite ({loss.item()})")
    analytic = grad_fn(model) if grad_fn is not None else backward(loss, model)

    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            a = analytic[name].reshape(-1).to(torch.float64)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn(model).item()
                flat[i] = orig - step
                down = loss_fn(model).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (up - down) / (2 * step)
                ai = a[i].item()
                err = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
                worst = max(worst, err)
            report.errors[name] = worst
    return report
