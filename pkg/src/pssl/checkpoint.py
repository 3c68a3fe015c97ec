"""Binary checkpoint format.

Layout (little-endian)::

    b"PSSL" | u32 version | u32 header_len | header JSON
           | u32 manifest_len | manifest JSON [(name, shape, dtype), ...]
           | raw tensor bytes in manifest order | u32 CRC32 of everything before
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor
from .encoders import Model, ModelConfig, init_params

MAGIC = b"PSSL"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(ValueError):
    pass


def save(path, model: Model, meta: dict | None = None) -> None:
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    manifest = []
    chunks = []
    for name, t in model.store.items():
        arr = t.data
        if not np.isfinite(arr).all():
            raise CheckpointError(f"parameter {name!r} is not finite")
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                         "trainable": bool(t.requires_grad)})
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    man = json.dumps(manifest).encode()
    body = b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<I", len(man)), man, *chunks])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read(path) -> tuple[ModelConfig, dict, list[dict], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    off = 12
    header = json.loads(body[off:off + hlen])
    off += hlen
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    manifest = json.loads(body[off:off + mlen])
    off += mlen
    arrays = {}
    for entry in manifest:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(_DTYPES[entry["dtype"]], copy=True)
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return ModelConfig.from_dict(header["config"]), header.get("meta", {}), manifest, arrays


def load(path, expected: ModelConfig | None = None) -> tuple[Model, dict]:
    """Load a checkpoint; with ``expected`` every tensor shape must match that config."""
    cfg, meta, manifest, arrays = read(path)
    ref = init_params(expected or cfg, seed=0, dtype=np.float32)
    names = [e["name"] for e in manifest]
    missing = [n for n in ref if n not in arrays]
    extra = [n for n in names if n not in ref]
    if missing or extra:
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    store = ParamStore()
    for entry in manifest:
        name = entry["name"]
        arr = arrays[name]
        if arr.shape != ref[name].shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                                  f"expected {ref[name].shape}")
        store.add(name, Tensor(arr, requires_grad=entry.get("trainable", True)))
    return Model(expected or cfg, store), meta
