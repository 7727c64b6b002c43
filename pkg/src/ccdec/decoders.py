"""Non-neural decoders for fixed codes.

* natural PQ/OPQ decoding (concatenate sub-centroids, rotate back),
* the naive binary reconstruction on the orthonormal sign-projection basis,
* the topline: one empirical mean per full code,
* the additive LUT decoder fitted by ridge least squares.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .core import CodeArray, DecoderLUT, as_matrix
from .encoders import ITQModel, PQModel, group_sums

TOPLINE_MAX_BITS = 24


class SingularSystemError(np.linalg.LinAlgError):
    """The ridge normal equations could not be solved to the required accuracy."""


def _check_codes(codes: CodeArray, m: int, bits: int) -> None:
    if codes.m != m or codes.bits != bits:
        raise ValueError(
            f"codes are {codes.m}x{codes.bits}, decoder expects {m}x{bits}"
        )


def natural_decode(model: PQModel, codes: CodeArray) -> np.ndarray:
    _check_codes(codes, model.m, model.bits)
    idx = codes.unpack()
    cents = model.codebook.centroids
    out = np.concatenate([cents[i][idx[:, i]] for i in range(model.m)], axis=1)
    if model.rotation is not None:
        out = (out.astype(np.float64) @ model.rotation.astype(np.float64)).astype(np.float32)
    return out


def binary_naive_decode(model: ITQModel, codes: CodeArray) -> np.ndarray:
    """``mean + (1/sqrt(d)) * sum_i s_i u_i`` with ``s_i = +1`` for bit 1 and -1 for bit 0."""
    if codes.bits != 1:
        raise ValueError(f"binary decoding needs 1-bit codes, got {codes.bits}-bit")
    _check_codes(codes, model.m, 1)
    signs = 2.0 * codes.unpack() - 1.0
    basis = model.projection.basis.astype(np.float64)
    out = signs @ basis / np.sqrt(model.dim) + model.mean.astype(np.float64)
    return out.astype(np.float32)


@dataclass(frozen=True, eq=False)
class ToplineDecoder:
    """Lookup of one reproduction value per full code (``2**(m*bits)`` rows)."""

    table: np.ndarray
    counts: np.ndarray
    m: int
    bits: int

    def decode(self, codes: CodeArray) -> np.ndarray:
        _check_codes(codes, self.m, self.bits)
        return self.table[codes.combined()]


def _all_codes(m: int, bits: int) -> CodeArray:
    from .core import pack_codes

    keys = np.arange(1 << (m * bits), dtype=np.int64)
    idx = (keys[:, None] >> (np.arange(m) * bits)) & ((1 << bits) - 1)
    return pack_codes(idx, bits)


def topline_fit(
    codes: CodeArray,
    X,
    fallback: Callable[[CodeArray], np.ndarray] | None = None,
) -> ToplineDecoder:
    """Per-code mean of the training vectors.

    Codes never seen in training are reconstructed by ``fallback`` (normally
    the encoder's natural decoder), or zero when no fallback is given.
    """
    X = as_matrix(X)
    if codes.n != X.shape[0]:
        raise ValueError(f"{codes.n} codes for {X.shape[0]} vectors")
    total_bits = codes.m * codes.bits
    if total_bits > TOPLINE_MAX_BITS:
        raise ValueError(
            f"topline over 2^{total_bits} codes exceeds the 2^{TOPLINE_MAX_BITS} limit"
        )
    K = 1 << total_bits
    sums, counts = group_sums(codes.combined(), X, K)
    seen = counts > 0
    table = np.zeros((K, X.shape[1]), np.float32)
    table[seen] = (sums[seen] / counts[seen, None]).astype(np.float32)
    if fallback is not None and not seen.all():
        unseen = np.flatnonzero(~seen)
        table[unseen] = fallback(_all_codes(codes.m, codes.bits).take(unseen))
    return ToplineDecoder(table=table, counts=counts.astype(np.int64), m=codes.m, bits=codes.bits)


def onehot_design(codes: CodeArray) -> sp.csr_matrix:
    """Sparse ``(n, m*ksub)`` one-hot matrix with one 1 per subquantizer block."""
    idx = codes.unpack()
    n, m = idx.shape
    cols = (idx + np.arange(m) * codes.ksub).ravel()
    rows = np.repeat(np.arange(n), m)
    return sp.csr_matrix(
        (np.ones(n * m, np.float64), (rows, cols)), shape=(n, m * codes.ksub)
    )


def default_lambda(codes: CodeArray) -> float:
    """1e-3 times the mean diagonal of the Gram matrix, i.e. ``1e-3 * n / ksub``."""
    return 1e-3 * codes.n * codes.m / (codes.m * codes.ksub)


def normal_equations(codes: CodeArray, X) -> tuple[np.ndarray, np.ndarray]:
    """Gram matrix ``I^T I`` and right-hand side ``I^T X`` (float64)."""
    X = as_matrix(X)
    design = onehot_design(codes)
    gram = (design.T @ design).toarray()
    rhs = np.asarray(design.T @ X.astype(np.float64))
    return gram, rhs


def aq_fit(codes: CodeArray, X, lam: float | None = None, rtol: float = 1e-6) -> DecoderLUT:
    """Ridge least-squares fit of the additive decoder tables.

    Solves ``(I^T I + lam * Id) C = I^T X`` for all output dimensions at once
    (each column is an independent solve sharing one factorization).
    ``lam=None`` uses :func:`default_lambda`. With ``lam=0`` the Gram matrix
    is singular for m > 1 (each block of one-hot columns sums to the same
    all-ones vector); the minimum-norm least-squares solution is returned.

    Raises:
        SingularSystemError: if the solution misses the normal equations by
            more than ``rtol`` relative residual.
    """
    X = as_matrix(X)
    if codes.n != X.shape[0]:
        raise ValueError(f"{codes.n} codes for {X.shape[0]} vectors")
    if lam is None:
        lam = default_lambda(codes)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    gram, rhs = normal_equations(codes, X)
    A = gram + lam * np.eye(gram.shape[0])
    C = None
    if lam > 0:
        try:
            C = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), rhs)
        except np.linalg.LinAlgError:
            C = None
    if C is None:
        w, V = np.linalg.eigh(A)
        keep = w > w.max() * A.shape[0] * np.finfo(np.float64).eps
        C = V[:, keep] @ ((V[:, keep].T @ rhs) / w[keep, None])
    resid = np.linalg.norm(A @ C - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if resid > rtol:
        raise SingularSystemError(
            f"normal-equation residual {resid:.2e} exceeds {rtol:.0e} at lambda={lam}; "
            "retry with a larger lambda"
        )
    return DecoderLUT(C.reshape(codes.m, codes.ksub, X.shape[1]))


def aq_decode(lut: DecoderLUT, codes: CodeArray, chunk: int = 65536) -> np.ndarray:
    """Sum of the selected full-dimension table rows."""
    if codes.m != lut.m or codes.ksub != lut.ksub:
        raise ValueError(
            f"codes are {codes.m}x{codes.ksub}, LUT is {lut.m}x{lut.ksub}"
        )
    out = np.empty((codes.n, lut.dim), np.float32)
    t = lut.tables.astype(np.float64)
    for s in range(0, codes.n, chunk):
        idx = codes.take(np.arange(s, min(s + chunk, codes.n))).unpack()
        acc = np.zeros((idx.shape[0], lut.dim), np.float64)
        for i in range(lut.m):
            acc += t[i][idx[:, i]]
        out[s : s + chunk] = acc
    return out


def pq_as_lut(model: PQModel) -> DecoderLUT:
    """Embed PQ sub-centroids (rotated back for OPQ) as an additive LUT."""
    m, ksub, dsub = model.codebook.centroids.shape
    t = np.zeros((m, ksub, model.dim), np.float64)
    for i in range(m):
        t[i, :, i * dsub : (i + 1) * dsub] = model.codebook.centroids[i]
    if model.rotation is not None:
        t = t @ model.rotation.astype(np.float64)
    return DecoderLUT(t)


def itq_as_lut(model: ITQModel) -> DecoderLUT:
    """The naive binary reconstruction written as 2-row LUTs (mean folded into bit 0 rows)."""
    basis = model.projection.basis.astype(np.float64) / np.sqrt(model.dim)
    t = np.stack([-basis, basis], axis=1)
    t[0] += model.mean.astype(np.float64)
    return DecoderLUT(t)
