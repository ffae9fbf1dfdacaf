"""Binary container shared by all model and image files.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CRSYNTH\\0"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    offset 16+H          data blob

The header holds ``kind`` (e.g. ``"ssm"``, ``"image_pca"``, ``"network"``,
``"distance_maps"``), free-form ``meta`` and an ``arrays`` list whose entries
give ``name``, ``dtype`` (``"<f8"``, ``"<f4"`` or ``"<i8"``), ``shape`` and
``offset``/``nbytes`` relative to the blob start.  Arrays are C-ordered and
stored back to back in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ValidationError

MAGIC = b"CRSYNTH\x00"
FORMAT_VERSION = 1
_DTYPES = {"<f8", "<f4", "<i8"}


def dumps(kind: str, meta: dict, arrays: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise ValidationError(f"unsupported dtype {a.dtype} for array {name!r}")
        raw = a.astype(dt, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dt, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": "craniosynth-container", "version": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def loads(data: bytes):
    """Return ``(kind, meta, arrays)``."""
    if data[:8] != MAGIC:
        raise ValidationError("not a craniosynth container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    blob = memoryview(data)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], arrays


def save(path, kind: str, meta: dict, arrays: dict) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, expected_kind: str | None = None):
    kind, meta, arrays = loads(Path(path).read_bytes())
    if expected_kind is not None and kind != expected_kind:
        raise ValidationError(f"expected a {expected_kind!r} file, got {kind!r}")
    return kind, meta, arrays
