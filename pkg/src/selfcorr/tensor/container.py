"""STNS tensor container files and checkpoint directories.

Layout of a container: ``b"STNS"``, version (u8), dtype code (u8), rank (u8),
``rank`` little-endian u32 dims, then the raw little-endian payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STNS"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}
MANIFEST = "manifest.json"


class ContainerError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODE_OF.get(np.dtype(dt))
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError("rank too large")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ContainerError("bad magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    offset = 7 + 4 * rank
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != count * dt.itemsize:
        raise ContainerError("payload size does not match dims")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def _file_name(name: str) -> str:
    return name.replace("/", "__").replace(".", "_") + ".stns"


def save_checkpoint(directory, params: dict, meta: dict | None = None) -> Path:
    """Write each array as a container plus a JSON manifest mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(params):
        value = params[name]
        arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        fname = _file_name(name)
        save_tensor(directory / fname, arr)
        files[name] = fname
    manifest = {"params": files, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Return ``(arrays_by_name, meta)``."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    arrays = {name: load_tensor(directory / fname) for name, fname in manifest["params"].items()}
    return arrays, manifest.get("meta", {})
