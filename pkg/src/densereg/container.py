"""Binary array container shared by models, cached renders and checkpoints.

Layout: one line of compact JSON (the header) terminated by ``\\n`` and padded
with spaces to a 64-byte boundary, followed by the array blobs. Each blob
starts on a 64-byte boundary relative to the start of the data section and is
stored little-endian.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from densereg.errors import ChecksumError, ContainerError, VersionError

MAGIC = "DREG-MODEL"
VERSION = 1
ALIGN = 64

_DTYPES = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i4": np.dtype("<i4"),
    "<i8": np.dtype("<i8"),
    "|u1": np.dtype("|u1"),
    "|b1": np.dtype("|b1"),
}


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _canonical_dtype(arr: np.ndarray, dtype: str | None) -> np.dtype:
    if dtype is not None:
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype!r}")
        return _DTYPES[dtype]
    kind = arr.dtype.kind
    if kind == "b":
        return _DTYPES["|b1"]
    if kind in "iu":
        return _DTYPES["<i8"] if arr.dtype.itemsize > 4 else _DTYPES["<i4"]
    if kind == "f":
        return _DTYPES["<f8"] if arr.dtype.itemsize > 4 else _DTYPES["<f4"]
    raise ContainerError(f"cannot store array of dtype {arr.dtype}")


def encode(
    arrays: dict[str, np.ndarray],
    kind: str,
    meta: dict | None = None,
    dtypes: dict[str, str] | None = None,
) -> bytes:
    """Serialize named arrays into container bytes."""
    dtypes = dtypes or {}
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _canonical_dtype(arr, dtypes.get(name))
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dt.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
                "crc32": zlib.crc32(data),
            }
        )
        blobs.append(data + b"\0" * _pad(len(data)))
        offset += len(blobs[-1])
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    head += b" " * _pad(len(head))
    return head + b"".join(blobs)


def decode(buf: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Parse container bytes; returns ``(arrays, header)``."""
    nl = buf.find(b"\n")
    if nl < 0:
        raise ChecksumError("container header is truncated")
    try:
        header = json.loads(buf[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContainerError(f"container header is not valid JSON: {exc}") from exc
    if header.get("magic") != MAGIC:
        raise ContainerError(f"bad magic {header.get('magic')!r}")
    if header.get("version") != VERSION:
        raise VersionError(
            f"container version {header.get('version')!r} is not supported (expected {VERSION})"
        )
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, got {header.get('kind')!r}")
    start = nl + 1
    start += _pad(start)
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        data = buf[lo : lo + entry["nbytes"]]
        if len(data) != entry["nbytes"] or zlib.crc32(data) != entry["crc32"]:
            raise ChecksumError(f"checksum mismatch for array {entry['name']!r}")
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ContainerError(f"unsupported dtype {entry['dtype']!r}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt).reshape(entry["shape"]).copy()
    return arrays, header


def write(path, arrays, kind, meta=None, dtypes=None) -> None:
    Path(path).write_bytes(encode(arrays, kind, meta=meta, dtypes=dtypes))


def read(path, kind: str | None = None):
    return decode(Path(path).read_bytes(), kind=kind)
