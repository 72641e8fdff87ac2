"""Binary checkpoint container.

Layout: magic ``PISTCKPT``, version uint32 (little-endian), uint64 header
length, UTF-8 JSON header, then raw array bytes in header order. The header
echoes the model config and lists (name, shape, dtype) per array.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "export_text", "CheckpointError"]

_MAGIC = b"PISTCKPT"
_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "config": config,
        "arrays": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
            for k, v in arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a pistress checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for meta in header["arrays"]:
            shape = tuple(meta["shape"])
            dtype = np.dtype(meta["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated array {meta['name']!r}")
            arrays[meta["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["config"], arrays


def export_text(path: str | Path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    """Flat text dump for diffing checkpoints."""
    with open(path, "w") as fh:
        fh.write("pistress-checkpoint-text 1\n")
        fh.write(json.dumps(config, sort_keys=True) + "\n")
        for name, v in arrays.items():
            fh.write(f"{name} {v.dtype} {' '.join(map(str, v.shape))}\n")
            np.savetxt(fh, np.atleast_1d(v).reshape(-1, 1), fmt="%.9e")
