"""Binary checkpoint container.

Layout: magic ``PTUNIF01`` (8 bytes), u32 little-endian header length, UTF-8 JSON
header, then raw little-endian row-major tensor bytes at the offsets the header
lists. Tensor records are sorted by name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PTUNIF01"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unreadable header."""


class CheckpointVersionError(CheckpointError):
    """Container version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Declared tensor bytes run past the end of the file."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    step: int = 0
    version: int = VERSION
    extra: dict = field(default_factory=dict)


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def encode(ckpt: Checkpoint) -> bytes:
    records, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        blob = arr.astype(_DTYPES[tag], copy=False).tobytes(order="C")
        records.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "byte_len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": ckpt.version, "config": ckpt.config, "rng_state": ckpt.rng_state, "step": ckpt.step, "tensors": records}
    if ckpt.extra:
        header["extra"] = ckpt.extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def decode(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic")
    if len(raw) < 12:
        raise CheckpointTruncatedError("file ends inside the header length field")
    (head_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + head_len:
        raise CheckpointTruncatedError(f"header declares {head_len} bytes; only {len(raw) - 12} present")
    try:
        header = json.loads(raw[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {header.get('version')!r}")
    body = raw[12 + head_len :]
    tensors = {}
    for rec in header["tensors"]:
        start, length = rec["offset"], rec["byte_len"]
        if start + length > len(body):
            raise CheckpointTruncatedError(f"tensor {rec['name']} needs bytes [{start}, {start + length}) of {len(body)}")
        dtype = np.dtype(_DTYPES[rec["dtype"]])
        expected = int(np.prod(rec["shape"], dtype=np.int64)) * dtype.itemsize
        if expected != length:
            raise CheckpointFormatError(f"tensor {rec['name']}: shape {rec['shape']} needs {expected} bytes, header says {length}")
        arr = np.frombuffer(body, dtype=dtype, count=expected // dtype.itemsize, offset=start).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(dtype.newbyteorder("="))
    return Checkpoint(header["config"], tensors, header.get("rng_state"), header["step"], header["version"], header.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
