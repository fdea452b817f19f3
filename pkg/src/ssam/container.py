"""Binary tensor container shared by features, embeddings and checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SSAMCKP1"
    offset 8   8 bytes   uint64 length H of the JSON header
    offset 16  H bytes   UTF-8 JSON header, right-padded with spaces
    ...        payloads  raw little-endian C-order tensor bytes

The header is ``{"format_version": 1, "meta": {...}, "tensors": [...]}``
where each tensor entry holds ``name``, ``dtype`` (numpy name such as
``"float32"``), ``shape``, ``offset`` (absolute byte offset, a multiple of
64) and ``nbytes``. Files are written to a temporary name and renamed.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"SSAMCKP1"
FORMAT_VERSION = 1
ALIGN = 64
_SUPPORTED = {"float32", "float64", "int32", "int64", "uint8", "uint32", "uint64", "bool"}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _layout(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> tuple[bytes, list[int]]:
    entries = []
    for name, arr in arrays.items():
        if arr.dtype.name not in _SUPPORTED:
            raise DataError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": 0, "nbytes": int(arr.nbytes)})
    start = ALIGN
    while True:
        offsets = []
        pos = start
        for entry in entries:
            offsets.append(pos)
            entry["offset"] = pos
            pos = _align(pos + entry["nbytes"])
        header = json.dumps({"format_version": FORMAT_VERSION, "meta": dict(meta),
                             "tensors": entries}, sort_keys=True).encode()
        needed = _align(16 + len(header))
        if needed <= start:
            break
        start = needed
    header = header.ljust(start - 16, b" ")
    return header, offsets


def save_tensors(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
                 meta: Mapping[str, Any] | None = None) -> None:
    """Write ``arrays`` (name -> ndarray) and a JSON-able ``meta`` dict."""
    arrays = {k: np.asarray(v, order="C") for k, v in arrays.items()}  # keeps 0-d shapes
    header, offsets = _layout(arrays, meta or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for arr, off in zip(arrays.values(), offsets):
                fh.write(b"\0" * (off - fh.tell()))
                fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temporary sibling, then rename it over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise DataError(f"{path}: truncated header")
        (length,) = struct.unpack("<Q", raw)
        try:
            header = json.loads(fh.read(length))
        except ValueError as exc:
            raise DataError(f"{path}: malformed header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)`` from a container file."""
    header = read_header(path)
    blob = Path(path).read_bytes()
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise DataError(f"{path}: tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(blob, dtype=dtype, count=n // dtype.itemsize if dtype.itemsize else 0,
                            offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return arrays, header["meta"]
