"""Binary model checkpoints with bit-exact round-trips.

Layout:

    bytes 0..3    magic ``CALM``
    bytes 4..7    format version, big-endian uint32
    bytes 8..15   header length in bytes, big-endian uint64
    header        UTF-8 JSON (sorted keys): target/alarm configs, tap
                  registry, parameter names + shapes, caller extras
    payload       the parameters' raw little-endian float32 data,
                  concatenated in header order, row-major

Saving and loading the same bundle produces identical scores because the
parameter bytes are copied verbatim.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .networks import AlarmConfig, ModelBundle, TargetConfig, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"CALM"
_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, bundle: ModelBundle, extras: dict | None = None) -> None:
    path = Path(path)
    names = list(bundle.params)
    header = {
        "target_cfg": bundle.target_cfg.to_dict(),
        "alarm_cfg": bundle.alarm_cfg.to_dict(),
        "taps": list(bundle.taps),
        "params": [{"name": n, "shape": list(bundle.params[n].shape)}
                   for n in names],
        "extras": extras or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack(">I", _VERSION))
        f.write(struct.pack(">Q", len(blob)))
        f.write(blob)
        for n in names:
            arr = bundle.params[n].data
            if arr.dtype != np.float32:  # pragma: no cover - params are f32
                arr = arr.astype(np.float32)
            f.write(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack(">I", f.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack(">Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        bundle = build_model(TargetConfig.from_dict(header["target_cfg"]),
                             AlarmConfig.from_dict(header["alarm_cfg"]),
                             seed=0)
        stored = [(p["name"], tuple(p["shape"])) for p in header["params"]]
        if [n for n, _ in stored] != list(bundle.params):
            raise CheckpointError(f"{path}: parameter registry does not match "
                                  f"the configured architecture")
        for name, shape in stored:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"{path}: truncated payload at {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            param = bundle.params[name]
            if param.shape != shape:
                raise CheckpointError(f"{path}: {name} has shape {shape}, "
                                      f"expected {param.shape}")
            param.data = arr.astype(np.float32)
        if bundle.taps != header["taps"]:
            raise CheckpointError(f"{path}: tap registry mismatch")
    return bundle, header["extras"]
