"""Versioned binary parameter checkpoints with a JSON sidecar manifest.

Layout (all integers little-endian):

    magic   4 bytes  b"ESCK"
    version u32      currently 1
    count   u32      number of tensors
    directory, per tensor:
        name_len u16, name utf-8, ndim u8, dims u32 each, offset u64
    data    concatenated float64 little-endian arrays

The manifest (same path + ``.json``) records hyperparameters and RNG state
so a run can resume bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .tape import Params, ParamTensor

MAGIC = b"ESCK"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: Params, manifest: dict | None = None) -> Path:
    path = Path(path)
    names = list(params)
    directory = bytearray()
    blobs: list[bytes] = []
    offset = 0
    for name in names:
        tensor = params[name]
        data = np.ascontiguousarray(tensor.values, dtype="<f8").tobytes()
        encoded = name.encode("utf-8")
        directory += struct.pack("<H", len(encoded)) + encoded
        directory += struct.pack("<B", tensor.values.ndim)
        directory += struct.pack(f"<{tensor.values.ndim}I", *tensor.values.shape)
        directory += struct.pack("<Q", offset)
        blobs.append(data)
        offset += len(data)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(names))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bytes(directory))
        fh.write(b"".join(blobs))
    manifest_path = path.with_suffix(path.suffix + ".json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest or {}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    cursor = 12
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, cursor)
        cursor += 2
        name = raw[cursor : cursor + name_len].decode("utf-8")
        cursor += name_len
        (ndim,) = struct.unpack_from("<B", raw, cursor)
        cursor += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, cursor)
        cursor += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, cursor)
        cursor += 8
        entries.append((name, shape, offset))
    data_start = cursor
    params: Params = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=start).reshape(shape)
        params[name] = ParamTensor(name, values.copy())
    manifest_path = path.with_suffix(path.suffix + ".json")
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return params, manifest


def checkpoint_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
