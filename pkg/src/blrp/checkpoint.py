"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"BLRP1"
    u32  header length, then UTF-8 JSON header {"config": ..., "meta": ...}
    u32  tensor count
    per tensor, in declaration order:
        u16 name length, UTF-8 name
        u8  ndim, then ndim x u32 dims
        float64 little-endian values, row-major
"""
import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"BLRP1"
_F64 = np.dtype("<f8")


def save(path, config, tensors, meta=None):
    """Write ``tensors`` (name -> array, insertion order kept) atomically."""
    header = json.dumps({"config": config, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=_F64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load(path):
    """Returns (config dict, tensors dict, meta dict)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a BLRP1 checkpoint")
    try:
        pos = 5
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        header = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=_F64, count=size, offset=pos).reshape(shape)
            pos += 8 * size
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header["config"], tensors, header["meta"]
