"""Binary parameter files.

Layout (little-endian)::

    b"HKDP"  magic
    u32      format version
    u32      length of the config JSON, then the UTF-8 JSON bytes
    u32      tensor count
    per tensor:
        u16  name length, then the UTF-8 name
        u8   ndim, then ndim x u32 dims
        float64 data in C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Tuple, Union

import numpy as np

from hierkd.core.errors import TrainingError

MAGIC = b"HKDP"
FORMAT_VERSION = 1


def save_params(path: Union[str, Path], tensors: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> None:
    config_bytes = json.dumps(dict(config), sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TrainingError("truncated parameter file", detail=what)
    return data


def load_params(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns (config, tensors)."""
    try:
        fh = Path(path).open("rb")
    except OSError as e:
        raise TrainingError(f"cannot open parameter file {path}", detail=str(e)) from e
    with fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise TrainingError(f"{path} is not a parameter file")
        version, config_len = struct.unpack("<II", _read(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise TrainingError(f"unsupported parameter file version {version}")
        config = json.loads(_read(fh, config_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4, "tensor count"))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, name))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, name))
            size = int(np.prod(shape)) if ndim else 1
            data = _read(fh, 8 * size, name)
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        return config, tensors
