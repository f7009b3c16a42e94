"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"MTUDA1"
    len, header       UTF-8 JSON text (architecture config and metadata)
    count
    count x record:   len, name (UTF-8), rank, dims[rank], fp64 LE payload

Round trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from mtuda.errors import ValidationError

MAGIC = b"MTUDA1"


def _u32(n):
    return struct.pack("<I", n)


def dumps(header: dict, tensors) -> bytes:
    parts = [MAGIC]
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [_u32(len(text)), text]
    tensors = list(tensors.items() if isinstance(tensors, dict) else tensors)
    parts.append(_u32(len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    if buf[: len(MAGIC)] != MAGIC:
        raise ValidationError("not a checkpoint (bad magic)")
    try:
        return _parse(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"corrupt checkpoint: {exc}") from exc


def _parse(buf):
    pos = len(MAGIC)

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        return v

    n = u32()
    header = json.loads(buf[pos : pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    for _ in range(u32()):
        n = u32()
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        dims = tuple(u32() for _ in range(u32()))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        tensors[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise ValidationError(f"trailing bytes in checkpoint ({len(buf) - pos})")
    return header, tensors


def save(path, header: dict, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(header, tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
