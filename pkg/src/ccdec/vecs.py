"""Readers and writers for the fvecs / bvecs / ivecs benchmark formats.

Each record is a little-endian int32 dimension followed by ``d`` values
(float32, uint8 or int32 respectively). All records in a file share ``d``.
"""

from __future__ import annotations

import os

import numpy as np

_ELEM = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


class VecsFormatError(ValueError):
    pass


def kind_of(path) -> str:
    ext = os.path.splitext(str(path))[1].lstrip(".")
    if ext not in _ELEM:
        raise ValueError(f"cannot infer vecs kind from {path!r}")
    return ext


def read_vecs(path, kind: str | None = None, count: int | None = None) -> np.ndarray:
    """Read a vecs file: float32 for fvecs/bvecs (bytes widened), int32 for ivecs.

    The whole file is validated from its size and the first header before the
    payload is loaded; every record's header is checked afterwards.

    Args:
        count: read only the first ``count`` records.
    """
    kind = kind or kind_of(path)
    elem = _ELEM[kind]
    size = os.path.getsize(path)
    if size < 4:
        raise VecsFormatError(f"{path}: file too short for a header")
    with open(path, "rb") as f:
        d = int(np.frombuffer(f.read(4), "<i4")[0])
    if d <= 0:
        raise VecsFormatError(f"{path}: non-positive dimension {d}")
    rec = 4 + d * elem.itemsize
    if size % rec:
        raise VecsFormatError(
            f"{path}: size {size} is not a multiple of the {rec}-byte record (truncated "
            "record or inconsistent dimension)"
        )
    n = size // rec
    if count is not None:
        n = min(n, count)
    raw = np.fromfile(path, dtype=np.uint8, count=n * rec).reshape(n, rec)
    dims = raw[:, :4].copy().view("<i4").ravel()
    if (dims != d).any():
        bad = int(np.flatnonzero(dims != d)[0])
        raise VecsFormatError(f"{path}: record {bad} has dimension {dims[bad]}, expected {d}")
    data = raw[:, 4:].copy().view(elem).reshape(n, d)
    if kind == "ivecs":
        return data.astype(np.int32)
    return data.astype(np.float32)


def write_vecs(path, data, kind: str | None = None) -> None:
    kind = kind or kind_of(path)
    elem = _ELEM[kind]
    a = np.asarray(data)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"need a non-empty 2-D array, got shape {a.shape}")
    if kind == "bvecs" and (a.min(initial=0) < 0 or a.max(initial=0) > 255):
        raise ValueError("bvecs values must lie in [0, 255]")
    n, d = a.shape
    rec = np.empty((n, 4 + d * elem.itemsize), np.uint8)
    rec[:, :4] = np.full((n, 1), d, "<i4").view(np.uint8)
    rec[:, 4:] = np.ascontiguousarray(a.astype(elem)).view(np.uint8).reshape(n, -1)
    rec.tofile(path)
