"""Binary tensor-bundle format used for checkpoints and raw tensor sidecars.

Layout of a bundle file:

    bytes 0..3    magic ``TBND``
    bytes 4..7    format version, uint32 little-endian
    bytes 8..15   header length ``H`` in bytes, uint64 little-endian
    next H bytes  UTF-8 JSON header
    remainder     tensor payload, concatenated row-major little-endian data

The JSON header has two keys: ``meta`` (free-form, JSON-serializable) and
``tensors``, a name -> {dtype, shape, offset, nbytes} map with offsets
relative to the start of the payload. Supported dtypes: ``f32-le``,
``f64-le``, ``i32-le``, ``i64-le``, ``u8``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"TBND"
VERSION = 1

_DTYPES = {
    "f32-le": "<f4",
    "f64-le": "<f8",
    "i32-le": "<i4",
    "i64-le": "<i8",
    "u8": "|u1",
}
_NP_TO_TAG = {np.dtype(v): k for k, v in _DTYPES.items()}


class BundleError(RuntimeError):
    """Raised when a bundle file is malformed or inconsistent."""


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):  # torch tensor without importing torch here
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype == np.float32:
        return arr.astype("<f4", copy=False)
    if arr.dtype == np.float64:
        return arr.astype("<f8", copy=False)
    if arr.dtype == np.int32:
        return arr.astype("<i4", copy=False)
    if arr.dtype in (np.int64, np.dtype(int)):
        return arr.astype("<i8", copy=False)
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.bool_):
        return arr.astype("|u1")
    raise BundleError(f"unsupported dtype {arr.dtype}")


def save_bundle(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays (numpy or torch) plus a JSON ``meta`` block."""
    path = Path(path)
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        raw = arr.tobytes()
        entries[name] = {
            "dtype": _NP_TO_TAG[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_bundle(path) -> tuple[dict, dict]:
    """Read a bundle; returns ``(tensors, meta)`` with numpy arrays."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BundleError(f"{path}: bad magic {raw[:4]!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise BundleError(f"{path}: unsupported bundle version {version}")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = raw[16 + hlen :]
    tensors = {}
    for name, ent in header["tensors"].items():
        if ent["dtype"] not in _DTYPES:
            raise BundleError(f"{path}: tensor {name} has bad dtype tag {ent['dtype']}")
        start, nbytes = ent["offset"], ent["nbytes"]
        if start + nbytes > len(payload):
            raise BundleError(f"{path}: tensor {name} overruns payload")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPES[ent["dtype"]])
        tensors[name] = arr.reshape(ent["shape"]).copy()
    return tensors, header.get("meta", {})
