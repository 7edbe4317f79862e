"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MELROFMR"
    version      uint32    FORMAT_VERSION
    header_len   uint32
    header       UTF-8 JSON {"format_version", "mode", "config", "extra", "num_blocks"}
    blocks       num_blocks times:
        name_len uint16, name (UTF-8)
        dtype    uint8     0 = float32, 1 = float64, 2 = int64
        ndim     uint8, then ndim x uint32 dims
        data     raw little-endian values, C order

Model parameters are written first in ``state_dict`` order (band projection,
interleaved stack, embedding projection, then onset and frame heads when
present), followed by optimizer blocks named ``optim.exp_avg.<param>`` and
``optim.exp_avg_sq.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import MelRoFormer, ModelConfig

__all__ = ["FORMAT_VERSION", "CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint", "load_model"]

MAGIC = b"MELROFMR"
FORMAT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    mode: str
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> MelRoFormer:
        model = MelRoFormer(self.config)
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        if dtype == np.float64:
            model.double()
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={missing}, unexpected={unexpected}")
        return model


def _write_block(f, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def save_checkpoint(path, model: MelRoFormer, optimizer_state=None, extra: dict | None = None) -> None:
    blocks = [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    if optimizer_state is not None:
        for name in sorted(optimizer_state.exp_avg):
            blocks.append((f"optim.exp_avg.{name}", optimizer_state.exp_avg[name].detach().cpu().numpy()))
            blocks.append((f"optim.exp_avg_sq.{name}", optimizer_state.exp_avg_sq[name].detach().cpu().numpy()))
    extra = dict(extra or {})
    if optimizer_state is not None:
        extra["optimizer"] = optimizer_state.hyperparameters()
    header = {
        "format_version": FORMAT_VERSION,
        "mode": model.config.mode,
        "config": model.config.to_dict(),
        "extra": extra,
        "num_blocks": len(blocks),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        f.write(raw)
        for name, arr in blocks:
            _write_block(f, name, arr)


def _read_exact(f, n):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<II", _read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        if header.get("format_version") != version:
            raise CheckpointError("header and container versions disagree")
        params, optim = {}, {}
        for _ in range(header["num_blocks"]):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2))
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} in block {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype).reshape(shape)
            arr = arr.astype(_DTYPES[code])
            (optim if name.startswith("optim.") else params)[name] = arr
        if f.read(1):
            raise CheckpointError("trailing bytes after the last block")
    config = ModelConfig.from_dict(header["config"])
    if config.mode != header["mode"]:
        raise CheckpointError("header mode disagrees with config mode")
    return Checkpoint(header["mode"], config, params, optim, header.get("extra", {}))


def load_model(path) -> MelRoFormer:
    return load_checkpoint(path).build_model()
