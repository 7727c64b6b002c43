"""Containers shared by every stage: dense matrices, packed codes, lookup tables.

Vectors are stored as 32-bit floats. Reductions over them (MSE sums, distance
accumulation, centroid updates) are done in 64-bit by the callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (1, 4, 8, 16)


class NonFiniteError(ValueError):
    """Raised when an array handed to the library contains NaN or Inf."""


def as_matrix(x, name: str = "X") -> np.ndarray:
    """Validate and convert ``x`` into a C-contiguous float32 ``(rows, dim)`` array.

    A 1-D input is treated as a single row.
    """
    a = np.asarray(x)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    a = np.ascontiguousarray(a, dtype=np.float32)
    if not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return a


def code_nbytes(m: int, bits: int) -> int:
    return (m * bits + 7) // 8


def pack_codes(indices, bits: int) -> "CodeArray":
    """Pack an ``(n, m)`` integer table into a :class:`CodeArray`.

    Subindex ``i`` of a vector occupies bits ``[i*bits, (i+1)*bits)`` of that
    vector's code, little-endian within bytes (so for 4-bit codes the first
    subindex is the low nibble).
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ValueError(f"indices must be 2-D (n, m), got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        over = np.argwhere((idx < 0) | (idx >= (1 << bits)))[0]
        raise ValueError(
            f"index {int(idx[tuple(over)])} at position {tuple(int(i) for i in over)} "
            f"does not fit in {bits} bits"
        )
    n, m = idx.shape
    idx = idx.astype(np.uint32, copy=False)
    if bits == 8:
        payload = idx.astype(np.uint8)
    elif bits == 16:
        payload = idx.astype("<u2").view(np.uint8).reshape(n, 2 * m)
    elif bits == 4:
        if m % 2:
            idx = np.concatenate([idx, np.zeros((n, 1), np.uint32)], axis=1)
        payload = (idx[:, 0::2] | (idx[:, 1::2] << 4)).astype(np.uint8)
    else:
        payload = np.packbits(idx.astype(np.uint8), axis=1, bitorder="little")
    return CodeArray(n=n, m=m, bits=bits, payload=np.ascontiguousarray(payload))


@dataclass(frozen=True, eq=False)
class CodeArray:
    """Packed per-vector subindices; each row of ``payload`` is one vector's code."""

    n: int
    m: int
    bits: int
    payload: np.ndarray

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        expected = (self.n, code_nbytes(self.m, self.bits))
        if self.payload.dtype != np.uint8 or self.payload.shape != expected:
            raise ValueError(
                f"payload must be uint8 with shape {expected}, got "
                f"{self.payload.dtype} {self.payload.shape}"
            )
        self.payload.setflags(write=False)

    @property
    def ksub(self) -> int:
        return 1 << self.bits

    def __len__(self) -> int:
        return self.n

    def unpack(self) -> np.ndarray:
        """Return the ``(n, m)`` table of subindices as int64."""
        p = self.payload
        if self.bits == 8:
            out = p.astype(np.int64)
        elif self.bits == 16:
            out = p.view("<u2").astype(np.int64)
        elif self.bits == 4:
            out = np.empty((self.n, 2 * p.shape[1]), np.int64)
            out[:, 0::2] = p & 0x0F
            out[:, 1::2] = p >> 4
        else:
            out = np.unpackbits(p, axis=1, bitorder="little").astype(np.int64)
        return out[:, : self.m]

    def take(self, rows) -> "CodeArray":
        rows = np.asarray(rows)
        payload = self.payload[rows]
        return CodeArray(n=payload.shape[0], m=self.m, bits=self.bits, payload=payload)

    def combined(self) -> np.ndarray:
        """Single integer key per code: ``sum_i k_i << (i * bits)``."""
        if self.m * self.bits > 62:
            raise ValueError(f"{self.m * self.bits}-bit codes do not fit one integer key")
        idx = self.unpack()
        shifts = np.arange(self.m, dtype=np.int64) * self.bits
        return (idx << shifts).sum(axis=1)

    def equals(self, other: "CodeArray") -> bool:
        return (
            (self.n, self.m, self.bits) == (other.n, other.m, other.bits)
            and np.array_equal(self.payload, other.payload)
        )


def _check_orthogonal(mat: np.ndarray, name: str, tol: float = 1e-4) -> None:
    g = mat.astype(np.float64) @ mat.T.astype(np.float64)
    err = np.abs(g - np.eye(g.shape[0])).max() if g.size else 0.0
    if err > tol:
        raise ValueError(f"{name} is not orthonormal (max deviation {err:.2e})")


@dataclass(frozen=True, eq=False)
class SubspaceCodebook:
    """Per-subspace centroid tables of a product quantizer.

    ``centroids`` has shape ``(m, ksub, dsub)``. When ``rotation`` is set,
    vectors are mapped to ``x @ rotation.T`` before being split into subspaces.
    """

    centroids: np.ndarray
    rotation: np.ndarray | None = None

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 3:
            raise ValueError(f"centroids must be (m, ksub, dsub), got {c.shape}")
        object.__setattr__(self, "centroids", c)
        if self.rotation is not None:
            r = np.ascontiguousarray(self.rotation, dtype=np.float32)
            if r.shape != (self.dim, self.dim):
                raise ValueError(f"rotation must be {self.dim}x{self.dim}, got {r.shape}")
            _check_orthogonal(r, "rotation")
            object.__setattr__(self, "rotation", r)

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def ksub(self) -> int:
        return self.centroids.shape[1]

    @property
    def dsub(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.dsub


@dataclass(frozen=True, eq=False)
class DecoderLUT:
    """Additive decoder tables, ``(m, ksub, dim)``: a code decodes to the sum of m rows."""

    tables: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.tables, dtype=np.float32)
        if t.ndim != 3:
            raise ValueError(f"tables must be (m, ksub, dim), got {t.shape}")
        object.__setattr__(self, "tables", t)

    @property
    def m(self) -> int:
        return self.tables.shape[0]

    @property
    def ksub(self) -> int:
        return self.tables.shape[1]

    @property
    def dim(self) -> int:
        return self.tables.shape[2]


@dataclass(frozen=True, eq=False)
class BinaryProjection:
    """Rows of ``basis`` (m x d) are the sign-projection directions."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.basis, dtype=np.float32)
        if b.ndim != 2 or b.shape[0] > b.shape[1]:
            raise ValueError(f"basis must be (m, d) with m <= d, got {b.shape}")
        object.__setattr__(self, "basis", b)

    @property
    def m(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def is_orthonormal(self, tol: float = 1e-4) -> bool:
        try:
            _check_orthogonal(self.basis, "basis", tol)
        except ValueError:
            return False
        return True


def sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``x`` and ``c`` in float64."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def nearest(x: np.ndarray, c: np.ndarray, chunk: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest row of ``c`` for every row of ``x``.

    Ties go to the lowest index.
    """
    n = x.shape[0]
    labels = np.empty(n, np.int64)
    dists = np.empty(n, np.float64)
    c64 = np.asarray(c, dtype=np.float64)
    cn = (c64 * c64).sum(1)
    step = max(1, min(chunk, (1 << 26) // max(1, c.shape[0])))
    for s in range(0, n, step):
        xb = np.asarray(x[s : s + step], dtype=np.float64)
        d = (xb * xb).sum(1)[:, None] - 2.0 * (xb @ c64.T) + cn[None, :]
        lab = np.argmin(d, axis=1)
        labels[s : s + step] = lab
        dists[s : s + step] = np.maximum(d[np.arange(len(lab)), lab], 0.0)
    return labels, dists


def mse(x, y) -> float:
    """Mean over rows of the squared reconstruction error, accumulated in float64."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        return 0.0
    total = 0.0
    for s in range(0, x.shape[0], 65536):
        diff = x[s : s + 65536].astype(np.float64) - y[s : s + 65536].astype(np.float64)
        total += float(np.einsum("ij,ij->", diff, diff))
    return total / x.shape[0]
