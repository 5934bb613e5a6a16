"""Flat ``section.key = value`` run configuration.

Sections mirror the dataclasses they populate: ``model`` (ModelConfig),
``train`` (TrainConfig), ``probe`` (ProbeConfig), ``data`` (DataConfig),
``synth`` (SynthSpec) and ``viz`` (VizConfig). A bare ``checkpoint`` key
names an input checkpoint. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .model import ModelConfig
from .probe import ProbeConfig
from .trainer import TrainConfig


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    test_path: str = ""
    limit: int = 0
    test_limit: int = 0
    size: int = 0


@dataclass
class VizConfig:
    samples: int = 8
    parts: str = ""
    part: int = -1
    k: int = 50
    crop: int = 16
    source: int = 0
    target: int = 1
    source_part: int = 0
    target_part: int = 0


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "data": DataConfig,
    "synth": SynthSpec,
    "viz": VizConfig,
}
TOP_LEVEL = {"checkpoint": "", "random_init": False}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    viz: VizConfig = field(default_factory=VizConfig)
    checkpoint: str = ""
    random_init: bool = False


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def coerce(value: str, like):
    """Parse ``value`` to the type of the default ``like``."""
    v = value.strip()
    if isinstance(like, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(v)
    if isinstance(like, float) or like is None:
        return None if v.lower() in ("none", "") else float(v)
    if isinstance(like, tuple):
        return tuple(int(p) for p in v.replace("(", "").replace(")", "").split(",") if p.strip())
    return v


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(pairs: dict[str, str]) -> RunConfig:
    values: dict[str, dict] = {name: _defaults(cls) for name, cls in SECTIONS.items()}
    top = dict(TOP_LEVEL)
    for key, raw in pairs.items():
        if "." not in key:
            if key not in top:
                raise ConfigKeyError(f"unknown config key {key!r}")
            top[key] = coerce(raw, TOP_LEVEL[key])
            continue
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in values[section]:
            raise ConfigKeyError(f"unknown config key {key!r}")
        try:
            values[section][name] = coerce(raw, values[section][name])
        except ValueError as err:
            raise ValueError(f"bad value for {key}: {err}") from None
    built = {name: SECTIONS[name](**vals) for name, vals in values.items()}
    return RunConfig(**built, **top)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    pairs = {}
    if path:
        pairs.update(parse_lines(Path(path).read_text().splitlines(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return resolve(pairs)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def dump(cfg: RunConfig) -> str:
    """The fully resolved configuration, one ``key = value`` per line, re-loadable."""
    lines = []
    for key in TOP_LEVEL:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            lines.append(f"{name}.{f.name} = {_fmt(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
