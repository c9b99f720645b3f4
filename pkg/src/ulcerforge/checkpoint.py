"""Binary checkpoint format.

Layout (all integers little-endian u32):

    magic "DFUD" | format version
    per tensor: name length | UTF-8 name | rank | dims... | raw float32 LE data
    0 (empty name length, ends the tensor section)
    footer length | footer UTF-8 JSON (schedule + model config + progress)
    CRC-32 of every preceding byte

The footer JSON is serialized canonically (sorted keys, no whitespace) so
save -> load -> save is byte-identical. Trivially parseable from any
language.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"DFUD"
FORMAT_VERSION = 1


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def serialize_checkpoint(tensors: Mapping[str, "np.ndarray | Tensor"], meta: Mapping) -> bytes:
    buf = bytearray()
    buf += MAGIC
    buf += _pack_u32(FORMAT_VERSION)
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if not nb:
            raise DataError("tensor names must be non-empty")
        buf += _pack_u32(len(nb))
        buf += nb
        buf += _pack_u32(arr.ndim)
        for dim in arr.shape:
            buf += _pack_u32(dim)
        buf += arr.tobytes()
    buf += _pack_u32(0)
    footer = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += _pack_u32(len(footer))
    buf += footer
    buf += _pack_u32(zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | Tensor"], meta: Mapping) -> None:
    payload = serialize_checkpoint(tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def deserialize_checkpoint(payload: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(payload) < 16 or payload[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    stored_crc = struct.unpack("<I", payload[-4:])[0]
    if zlib.crc32(payload[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DataError("checkpoint checksum mismatch")
    pos = 4
    (version,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    while True:
        (name_len,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if name_len == 0:
            break
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", payload, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in tensors:
            raise DataError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(np.float32)
    (footer_len,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    meta = json.loads(payload[pos:pos + footer_len].decode("utf-8"))
    return tensors, meta


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
