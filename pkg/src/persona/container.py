"""Keyed binary tensor container.

Single-file format used for checkpoints and head templates:

    [8 bytes]  header length n, little-endian uint64
    [n bytes]  UTF-8 JSON header
    [...]      raw tensor payload, little-endian, concatenated

Header layout::

    {
      "format": 1,
      "meta": { ... arbitrary JSON ... },
      "tensors": {
        "name": {"dtype": "f32", "shape": [3, 4], "offset": 0, "nbytes": 48},
        ...
      }
    }

Offsets are relative to the end of the header. Tensors are stored C-contiguous.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1

_DTYPE_CODES: dict[str, np.dtype] = {
    "f16": np.dtype("<f2"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i8": np.dtype("<i1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("<u1"),
    "b8": np.dtype("|b1"),
}
_CODES_BY_KIND = {np.dtype(d).newbyteorder("="): code for code, d in _DTYPE_CODES.items()}


class ContainerError(RuntimeError):
    """Raised for malformed files and header/payload mismatches."""


def _dtype_code(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("=")
    if key not in _CODES_BY_KIND:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return _CODES_BY_KIND[key]


def save_container(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write named arrays plus a JSON meta block to one file."""
    entries: dict[str, dict[str, Any]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)  # ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        blob = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
        entries[name] = {
            "dtype": code,
            "shape": shape,
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": FORMAT_VERSION,
        "meta": dict(meta) if meta else {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container file back into (tensors, meta)."""
    path = Path(path)
    with open(path, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ContainerError(f"{path}: truncated header length")
        header_len = int.from_bytes(raw_len, "little")
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise ContainerError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"{path}: bad header: {e}") from e
        if header.get("format") != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format {header.get('format')!r}")
        payload = f.read()
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header["tensors"].items():
        code = entry["dtype"]
        if code not in _DTYPE_CODES:
            raise ContainerError(f"{path}: unknown dtype code {code!r} for {name!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise ContainerError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(chunk, dtype=_DTYPE_CODES[code]).reshape(entry["shape"])
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, header.get("meta", {})
