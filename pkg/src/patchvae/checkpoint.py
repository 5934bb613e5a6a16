"""Versioned named-array checkpoint container.

Layout (all integers little-endian)::

    b"PVAE1" | u16 version | u32 header length | header JSON (utf-8)
    | array payloads, concatenated | u32 CRC-32 of everything before it

The header lists every array as ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the start of the payload block.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import ModelConfig, build_model
from .nn import INIT_SCHEME

MAGIC = b"PVAE1"
VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    train_config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    epoch_history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = _le(np.asarray(ckpt.arrays[name]))
        dtype = a.dtype.str
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {dtype}")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "epoch_history": ckpt.epoch_history,
        "meta": {"init_scheme": INIT_SCHEME, **ckpt.meta},
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:len(MAGIC)]!r}, not a PVAE1 checkpoint")
    if len(data) < len(MAGIC) + 10:
        raise CheckpointError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack_from("<HI", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, payload is corrupt")
    start = len(MAGIC) + 6
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen : len(data) - 4]
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    meta = dict(header.get("meta", {}))
    return Checkpoint(
        ModelConfig.from_dict(header["model_config"]),
        arrays,
        header["step"],
        header["epoch"],
        header["train_config"],
        header["history"],
        header["epoch_history"],
        meta,
    )


def model_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    out = {f"param/{n}": p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
    out.update({f"buffer/{n}": b.detach().cpu().numpy().copy() for n, b in model.named_buffers()})
    return out


def load_model_arrays(model: nn.Module, ckpt: Checkpoint) -> None:
    params, buffers = ckpt.group("param"), ckpt.group("buffer")
    state = {**params, **buffers}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays for {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()}, strict=True)


def restore_model(ckpt: Checkpoint) -> nn.Module:
    model = build_model(ckpt.model_config)
    load_model_arrays(model, ckpt)
    model.eval()
    return model
