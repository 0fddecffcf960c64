"""Binary checkpoint serialization.

File layout (all integers little-endian):

    magic     4 bytes   b"RPDN"
    version   u16       1
    cfg_len   u32       length of the UTF-8 JSON config blob
    cfg       bytes     model config (plus "fused" and "dtype" keys)
    count     u32       number of tensor entries
    entry*    repeated  name_len: u16, name: UTF-8 bytes,
                        dtype: u8 (0 = f32, 1 = f64), ndim: u8,
                        dims: u32 * ndim, payload: little-endian scalars

Entries carry every learnable parameter and every BN running-statistics
buffer, named exactly as `iter_params` / `iter_buffers` name them, so a
round trip reproduces the model bitwise.  The config blob makes the file
self-describing: `load` rebuilds the structure before filling it.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO, Dict, Tuple

import numpy as np

from .errors import CorruptFileError, FormatError, IntegrityError, VersionError
from .model import ModelConfig, RapidNetModel, build_model

MAGIC = b"RPDN"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_entry(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptFileError(f"file truncated: wanted {n} bytes, got {len(data)}")
    return data


def _read_entry(fh: BinaryIO) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPE:
        raise CorruptFileError(f"entry {name!r} has unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    dtype = _CODE_DTYPE[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return name, arr.astype(dtype.newbyteorder("="))


def save(model: RapidNetModel, path: str) -> None:
    """Write the model's config, parameters, and BN buffers to `path`."""
    blob = dict(model.config.to_dict())
    blob["fused"] = model.fused
    blob["dtype"] = "f64" if model.dtype == np.float64 else "f32"
    cfg_bytes = json.dumps(blob).encode("utf-8")

    entries = [(name, p.value) for name, p in model.iter_params()]
    entries += model.iter_buffers()

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_entry(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path: str) -> RapidNetModel:
    """Rebuild a model from a checkpoint; every tensor is restored bitwise."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            blob = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
            cfg = ModelConfig.from_dict(blob)
        except (ValueError, KeyError) as exc:
            raise CorruptFileError(f"unreadable config blob: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        stored: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_entry(fh)
            if name in stored:
                raise IntegrityError(f"duplicate tensor entry {name!r}")
            stored[name] = arr

    model = build_model(cfg, dtype=blob.get("dtype", "f32"))
    if blob.get("fused", False):
        from .reparam import reparameterize_model

        model, _ = reparameterize_model(model)

    expected = {name: p.value for name, p in model.iter_params()}
    buffers = dict(model.iter_buffers())
    for name, arr in stored.items():
        target = expected.pop(name, None)
        if target is None:
            if name not in buffers:
                raise IntegrityError(f"checkpoint entry {name!r} does not exist in the "
                                     f"{cfg.variant!r} model structure")
            target = buffers.pop(name)
        if target.shape != arr.shape:
            raise IntegrityError(f"entry {name!r} has shape {arr.shape}, "
                                 f"model expects {target.shape}")
        target[...] = arr.astype(target.dtype, copy=False)
    missing = list(expected) + list(buffers)
    if missing:
        raise IntegrityError(f"checkpoint is missing tensors: {missing[:5]}"
                             + ("..." if len(missing) > 5 else ""))
    return model
