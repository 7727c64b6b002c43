"""Single-file model format.

Layout (little-endian)::

    b"CCDECMDL"                 magic
    u32 version                 currently 1
    u16 len + ascii             model kind
    u32 count, then count x (u16 len + ascii key, i64 value)      integer header
    u32 count, then count x (u16 len + ascii key, f64 value)      real scalars
    u32 count, then count x tensor
    tensor := u16 len + ascii name, u8 dtype tag, u8 ndim, ndim x u64 shape, raw data

Tensor dtype tags: 0 = float32, 1 = int32, 2 = uint8. Reals are stored as
float32, so models whose arrays are float32 round-trip bit-exactly.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .core import CodeArray, DecoderLUT, SubspaceCodebook
from .decoders import ToplineDecoder
from .encoders import ITQModel, KMeansModel, PQModel
from .nn import NNDecoderParams

MAGIC = b"CCDECMDL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class ModelFormatError(ValueError):
    pass


def _wstr(buf, s: str) -> None:
    b = s.encode("ascii")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise ModelFormatError("truncated model stream")
    return b


def _rstr(buf) -> str:
    (n,) = struct.unpack("<H", _read(buf, 2))
    return _read(buf, n).decode("ascii")


def pack(kind: str, ints: dict, reals: dict, tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _wstr(buf, kind)
    buf.write(struct.pack("<I", len(ints)))
    for k, v in ints.items():
        _wstr(buf, k)
        buf.write(struct.pack("<q", int(v)))
    buf.write(struct.pack("<I", len(reals)))
    for k, v in reals.items():
        _wstr(buf, k)
        buf.write(struct.pack("<d", float(v)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if a.dtype.kind == "f":
            a = a.astype("<f4")
        elif a.dtype == np.uint8:
            a = a.astype("u1")
        else:
            a = a.astype("<i4")
        _wstr(buf, name)
        buf.write(struct.pack("<BB", _TAGS[a.dtype], a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


def unpack(data: bytes) -> tuple[str, dict, dict, dict]:
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise ModelFormatError("bad magic: not a ccdec model file")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    kind = _rstr(buf)
    ints, reals, tensors = {}, {}, {}
    (n,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(n):
        k = _rstr(buf)
        ints[k] = struct.unpack("<q", _read(buf, 8))[0]
    (n,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(n):
        k = _rstr(buf)
        reals[k] = struct.unpack("<d", _read(buf, 8))[0]
    (n,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(n):
        name = _rstr(buf)
        tag, ndim = struct.unpack("<BB", _read(buf, 2))
        if tag not in _DTYPES:
            raise ModelFormatError(f"unknown tensor dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}Q", _read(buf, 8 * ndim))
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(_read(buf, count * dt.itemsize), dt).reshape(shape).copy()
    if buf.read(1):
        raise ModelFormatError("trailing bytes after the last tensor")
    return kind, ints, reals, tensors


def serialize_model(model) -> bytes:
    if isinstance(model, KMeansModel):
        return pack(
            "kmeans",
            {"iterations_run": model.iterations_run},
            {"final_mse": model.final_mse},
            {"centroids": model.centroids},
        )
    if isinstance(model, PQModel):
        t = {"centroids": model.codebook.centroids}
        if model.rotation is not None:
            t["rotation"] = model.rotation
        return pack("pq", {"bits": model.bits}, {}, t)
    if isinstance(model, ITQModel):
        return pack(
            "itq", {}, {},
            {"mean": model.mean, "pca": model.pca, "rotation": model.rotation},
        )
    if isinstance(model, DecoderLUT):
        return pack("decoder_lut", {}, {}, {"tables": model.tables})
    if isinstance(model, ToplineDecoder):
        return pack(
            "topline", {"m": model.m, "bits": model.bits}, {},
            {"table": model.table, "counts": model.counts},
        )
    if isinstance(model, NNDecoderParams):
        if model.dtype != np.float32:
            raise ValueError("only float32 decoder parameters can be stored")
        t = dict(model.arrays)
        t.update(model.buffers)
        return pack(
            "nn_decoder",
            {"block_count": model.block_count, "hidden": model.hidden, "residual": int(model.residual)},
            {"dropout": model.dropout},
            t,
        )
    if isinstance(model, CodeArray):
        return pack("codes", {"n": model.n, "m": model.m, "bits": model.bits}, {}, {"payload": model.payload})
    raise TypeError(f"cannot serialize {type(model).__name__}")


def deserialize_model(data: bytes):
    kind, ints, reals, t = unpack(data)
    try:
        if kind == "kmeans":
            return KMeansModel(t["centroids"], ints["iterations_run"], reals["final_mse"])
        if kind == "pq":
            return PQModel(SubspaceCodebook(t["centroids"], t.get("rotation")), ints["bits"])
        if kind == "itq":
            return ITQModel(t["mean"], t["pca"], t["rotation"])
        if kind == "decoder_lut":
            return DecoderLUT(t["tables"])
        if kind == "topline":
            return ToplineDecoder(t["table"], t["counts"].astype(np.int64), ints["m"], ints["bits"])
        if kind == "nn_decoder":
            buffers = {k: t.pop(k) for k in list(t) if k.endswith(("running_mean", "running_var"))}
            return NNDecoderParams(
                t, buffers, ints["block_count"], ints["hidden"], bool(ints["residual"]), reals["dropout"]
            )
        if kind == "codes":
            return CodeArray(ints["n"], ints["m"], ints["bits"], t["payload"])
    except KeyError as e:
        raise ModelFormatError(f"{kind} model is missing field {e}") from None
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save(model, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(model))


def load(path):
    with open(path, "rb") as f:
        return deserialize_model(f.read())
