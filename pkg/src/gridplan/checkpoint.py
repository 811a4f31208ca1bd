"""Byte-stable binary container for named arrays plus a JSON header.

Used for model checkpoints and evaluation reports.  The format has no
timestamps and serializes arrays and header keys in sorted order, so writing
the same logical content twice produces identical bytes.

Layout:
    magic "GPCK" | version u32 | header_len u64 | header (JSON, utf-8)
    | n_arrays u32 | per array: name_len u32, name, dtype_len u32, dtype,
      ndim u32, shape i64*, payload bytes
    | sha256 of everything after the magic
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from typing import Any

import numpy as np

MAGIC = b"GPCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode_header(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_arrays(path, header: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    hdr = _encode_header(header)
    buf.write(struct.pack("<IQ", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.ndim:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d
        nb = name.encode()
        dt = arr.dtype.str.encode()  # includes byte order, e.g. '<f4'
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", len(dt)))
        buf.write(dt)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(payload)
        f.write(digest)


def load_arrays(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, digest = blob[4:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    buf = io.BytesIO(payload)
    version, hdr_len = struct.unpack("<IQ", buf.read(12))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(buf.read(hdr_len).decode())
    (n_arrays,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode()
        (dlen,) = struct.unpack("<I", buf.read(4))
        dtype = np.dtype(buf.read(dlen).decode())
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}q", buf.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf.read(count * dtype.itemsize), dtype=dtype)
        arrays[name] = arr.reshape(shape).copy()
    return header, arrays
