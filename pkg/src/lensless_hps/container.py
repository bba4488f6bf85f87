"""Single-file tensor container (``.lhps``).

Byte layout, little-endian throughout::

    magic      4 bytes  b"LHPS"
    version    u16
    count      u32
    per entry:
      name_len u32, name (UTF-8)
      dtype    u8   (0 = f64, 1 = i64)
      rank     u8
      dims     u64 * rank
      payload  prod(dims) * 8 bytes
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ToolkitError

MAGIC = b"LHPS"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_TAGS = {"f": 0, "i": 1}


def _as_storable(name, value):
    arr = np.asarray(value)
    if arr.dtype.kind == "b":
        arr = arr.astype(np.int64)
    if arr.dtype.kind in "iu":
        return 1, np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype.kind == "f":
        return 0, np.ascontiguousarray(arr, dtype="<f8")
    raise ToolkitError("dtype", f"entry {name!r} has unsupported dtype {arr.dtype}")


def dumps(entries):
    """Serialize a mapping of name -> array. Insertion order is preserved."""
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, value in entries.items():
        tag, arr = _as_storable(name, value)
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ToolkitError("shape", f"entry {name!r} rank too large")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def loads(data):
    """Parse container bytes into a ``dict`` of numpy arrays."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ToolkitError("format", "not an LHPS container (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
    except struct.error as exc:
        raise ToolkitError("format", "truncated header") from exc
    if version != VERSION:
        raise ToolkitError("format", f"unsupported container version {version}")

    pos = 10
    entries = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            if tag not in DTYPES:
                raise ToolkitError("format", f"entry {name!r} has unknown dtype tag {tag}")
            if name in entries:
                raise ToolkitError("format", f"duplicate entry name {name!r}")
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = n * 8
            if pos + nbytes > len(view):
                raise ToolkitError("format", f"entry {name!r} payload truncated")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=DTYPES[tag]).reshape(dims)
            entries[name] = arr.copy()
            pos += nbytes
    except struct.error as exc:
        raise ToolkitError("format", "truncated entry header") from exc
    if pos != len(view):
        raise ToolkitError("format", f"{len(view) - pos} trailing bytes")
    return entries


def save(path, entries):
    data = dumps(entries)
    Path(path).write_bytes(data)
    return data


def load(path):
    return loads(Path(path).read_bytes())


def digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def digest_file(path):
    return digest_bytes(Path(path).read_bytes())


def digest_arrays(entries):
    """Content digest of a mapping of arrays (same as the digest of its file)."""
    return digest_bytes(dumps(entries))
