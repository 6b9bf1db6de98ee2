"""Binary checkpoint format.

Layout (little-endian)::

    b"ZARMCKPT"            8-byte format id
    u32 version
    64 bytes               ASCII sha256 of the architecture fields of the config
    u32 tensor count
    per tensor:
        u16 path length, path (UTF-8)
        u8 ndim, u32 * ndim shape
        float32 * prod(shape) values

Values are always stored as 32-bit reals; a double-precision model loads
them exactly as stored, so evaluation from a checkpoint is reproducible.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .numerics import ParamStore

MAGIC = b"ZARMCKPT"
VERSION = 1
log = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, store: ParamStore, config_hash: str,
                    values: dict[str, np.ndarray] | None = None) -> None:
    """Write ``store`` (or an explicit ``values`` snapshot of it) to ``path``."""
    values = values if values is not None else {k: t.data for k, t in store.items()}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_hash.encode("ascii")[:64].ljust(64, b"0"))
        fh.write(struct.pack("<I", len(values)))
        for name, arr in values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad format id)")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_hash = blob[pos:pos + 64].decode("ascii")
    pos += 64
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return config_hash, out


def load_checkpoint(path: str | Path, store: ParamStore, config_hash: str | None = None) -> None:
    """Load values into ``store`` after checking every path and shape."""
    saved_hash, values = read_checkpoint(path)
    if config_hash is not None and saved_hash != config_hash:
        log.warning("checkpoint %s was written for a different architecture config", path)
    missing = [p for p in store.paths() if p not in values]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]}")
    extra = [p for p in values if p not in store]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]}")
    for p in store.paths():
        if values[p].shape != store[p].shape:
            raise CheckpointError(f"shape mismatch for {p}: checkpoint {values[p].shape}, model {store[p].shape}")
    for p in store.paths():
        store[p].data = values[p].astype(store.dtype)
