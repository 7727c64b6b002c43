"""Fixed encoders: k-means, product quantization (PQ), OPQ and ITQ binary codes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import (
    BinaryProjection,
    CodeArray,
    SubspaceCodebook,
    as_matrix,
    nearest,
    pack_codes,
)

log = logging.getLogger(__name__)

KMEANS_ITERS = 25
OPQ_OUTER_ITERS = 20
OPQ_INNER_ITERS = 4
ITQ_ITERS = 50


@dataclass(frozen=True, eq=False)
class KMeansModel:
    centroids: np.ndarray
    iterations_run: int
    final_mse: float
    mse_history: tuple = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, X) -> np.ndarray:
        return nearest(as_matrix(X), self.centroids)[0]


def group_sums(labels: np.ndarray, X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-label float64 sums of the rows of ``X`` and per-label counts."""
    n = len(labels)
    onehot = sp.csr_matrix(
        (np.ones(n, np.float64), (labels, np.arange(n))), shape=(k, n)
    )
    sums = np.asarray(onehot @ X.astype(np.float64, copy=False))
    counts = np.bincount(labels, minlength=k)
    return sums, counts


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    X64 = X.astype(np.float64)
    norms = (X64 * X64).sum(1)
    chosen = [int(rng.integers(n))]
    closest = np.maximum(norms - 2 * X64 @ X64[chosen[0]] + norms[chosen[0]], 0.0)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen centroid
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
        else:
            r = rng.random() * total
            i = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            chosen.append(min(i, n - 1))
        c = chosen[-1]
        np.minimum(closest, np.maximum(norms - 2 * X64 @ X64[c] + norms[c], 0.0), out=closest)
    return X[np.array(chosen)].astype(np.float64)


def lloyd(
    X: np.ndarray, centroids: np.ndarray, iters: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Run Lloyd iterations from ``centroids``.

    Returns the final centroids, the assignment to them, and the MSE measured
    after each assignment step (non-increasing). Empty clusters are reseeded
    with the worst-fitted point of the largest cluster.
    """
    k = centroids.shape[0]
    C = np.array(centroids, dtype=np.float64)
    labels, dists = nearest(X, C)
    history = [float(dists.mean())]
    for _ in range(iters):
        sums, counts = group_sums(labels, X, k)
        nz = counts > 0
        C[nz] = sums[nz] / counts[nz, None]
        taken = set()
        for e in np.flatnonzero(~nz):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            order = members[np.argsort(-dists[members], kind="stable")]
            pick = next((int(p) for p in order if p not in taken), int(order[0]))
            taken.add(pick)
            C[e] = X[pick]
            counts[big] -= 1
            counts[e] = 1
        labels, dists = nearest(X, C)
        history.append(float(dists.mean()))
    return C, labels, history


def kmeans_train(X, K: int, iters: int = KMEANS_ITERS, seed: int = 0) -> KMeansModel:
    """k-means with k-means++ seeding.

    Raises:
        ValueError: if ``K`` exceeds the number of rows.
    """
    X = as_matrix(X)
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"K={K} must be in [1, {X.shape[0]}]")
    rng = np.random.default_rng(seed)
    C, _, history = lloyd(X, _kmeanspp(X, K, rng), iters)
    return KMeansModel(
        centroids=C.astype(np.float32),
        iterations_run=iters,
        final_mse=history[-1],
        mse_history=tuple(history),
    )


@dataclass(frozen=True, eq=False)
class PQModel:
    """Product quantizer PQ m x b, optionally preceded by an OPQ rotation."""

    codebook: SubspaceCodebook
    bits: int
    mse_history: tuple = field(default=())

    @property
    def m(self) -> int:
        return self.codebook.m

    @property
    def dim(self) -> int:
        return self.codebook.dim

    @property
    def ksub(self) -> int:
        return self.codebook.ksub

    @property
    def rotation(self):
        return self.codebook.rotation

    @property
    def name(self) -> str:
        kind = "OPQ" if self.rotation is not None else "PQ"
        return f"{kind}{self.m}x{self.bits}"

    def rotate(self, X: np.ndarray) -> np.ndarray:
        if self.rotation is None:
            return X
        return (X.astype(np.float64) @ self.rotation.T.astype(np.float64)).astype(np.float32)


def _check_pq_args(X: np.ndarray, m: int, b: int) -> None:
    d = X.shape[1]
    if m < 1 or d % m:
        raise ValueError(f"dimension {d} is not divisible by m={m}")
    if b not in (1, 4, 8, 16):
        raise ValueError(f"bits per subindex must be 1, 4, 8 or 16, got {b}")
    if (1 << b) > X.shape[0]:
        raise ValueError(f"need at least {1 << b} training vectors for {b}-bit subquantizers")


def pq_train(X, m: int, b: int, iters: int = KMEANS_ITERS, seed: int = 0) -> PQModel:
    """Train one k-means per subspace slice."""
    X = as_matrix(X)
    _check_pq_args(X, m, b)
    dsub = X.shape[1] // m
    cents = np.empty((m, 1 << b, dsub), np.float32)
    for i in range(m):
        km = kmeans_train(X[:, i * dsub : (i + 1) * dsub], 1 << b, iters, seed + i)
        cents[i] = km.centroids
    return PQModel(SubspaceCodebook(cents), b)


def _pq_assign(cents: np.ndarray, Xr: np.ndarray) -> tuple[np.ndarray, float]:
    m, _, dsub = cents.shape
    idx = np.empty((Xr.shape[0], m), np.int64)
    total = 0.0
    for i in range(m):
        idx[:, i], dist = nearest(Xr[:, i * dsub : (i + 1) * dsub], cents[i])
        total += float(dist.sum())
    return idx, total / max(1, Xr.shape[0])


def pq_encode(model: PQModel, X) -> CodeArray:
    """Nearest sub-centroid per subspace (rotation applied first); ties to lowest index."""
    X = as_matrix(X)
    if X.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {X.shape[1]}")
    idx, _ = _pq_assign(model.codebook.centroids, model.rotate(X))
    return pack_codes(idx, model.bits)


def _procrustes(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||A R^T - B||_F."""
    U, _, Vt = np.linalg.svd(A.T @ B)
    return (U @ Vt).T


def opq_train(
    X,
    m: int,
    b: int,
    outer_iters: int = OPQ_OUTER_ITERS,
    seed: int = 0,
    iters: int = KMEANS_ITERS,
    inner_iters: int = OPQ_INNER_ITERS,
) -> PQModel:
    """Non-parametric OPQ started from the plain PQ solution (rotation = identity).

    Each outer iteration solves the rotation by orthogonal Procrustes against
    the current reconstructions, re-assigns codes and runs warm-started Lloyd
    steps in every subspace, so the training MSE never increases.
    """
    X = as_matrix(X)
    base = pq_train(X, m, b, iters, seed)
    d = X.shape[1]
    dsub = d // m
    cents = base.codebook.centroids.astype(np.float64)
    R = np.eye(d)
    X64 = X.astype(np.float64)
    idx, err = _pq_assign(cents, X)
    history = [err]
    for it in range(outer_iters):
        Y = np.concatenate([cents[i][idx[:, i]] for i in range(m)], axis=1)
        R = _procrustes(X64, Y)
        Xr = (X64 @ R.T).astype(np.float32)
        for i in range(m):
            sl = Xr[:, i * dsub : (i + 1) * dsub]
            cents[i], idx[:, i], _ = lloyd(sl, cents[i], inner_iters)
        idx, err = _pq_assign(cents, Xr)
        history.append(err)
        log.debug("opq iter %d mse %.6g", it, err)
    rotation = R if outer_iters > 0 else None
    return PQModel(SubspaceCodebook(cents.astype(np.float32), rotation), b, tuple(history))


@dataclass(frozen=True, eq=False)
class ITQModel:
    """PCA projection (d x m), learned rotation (m x m) and the training mean."""

    mean: np.ndarray
    pca: np.ndarray
    rotation: np.ndarray
    objective_history: tuple = ()

    @property
    def m(self) -> int:
        return self.pca.shape[1]

    @property
    def dim(self) -> int:
        return self.pca.shape[0]

    @property
    def projection(self) -> BinaryProjection:
        u = self.pca.astype(np.float64) @ self.rotation.astype(np.float64)
        return BinaryProjection(u.T)

    def project(self, X: np.ndarray) -> np.ndarray:
        """Coordinates ``u_i^T (x - mean)`` in float64."""
        u = self.pca.astype(np.float64) @ self.rotation.astype(np.float64)
        return (X.astype(np.float64) - self.mean.astype(np.float64)) @ u


def _random_rotation(m: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    return q * np.sign(np.diag(r))


def itq_train(X, m: int, iters: int = ITQ_ITERS, seed: int = 0) -> ITQModel:
    """Iterative quantization: PCA to m dims, then alternate sign codes and Procrustes.

    With ``iters=0`` no rotation is learned and the basis is the top-m
    principal directions. Otherwise the rotation starts from a random
    orthogonal matrix drawn from ``seed``.
    """
    X = as_matrix(X)
    n, d = X.shape
    if m > d:
        raise ValueError(f"m={m} bits exceeds dimension {d}")
    mean = X.astype(np.float64).mean(0)
    Xc = X.astype(np.float64) - mean
    evals, evecs = np.linalg.eigh(Xc.T @ Xc)
    order = np.argsort(-evals, kind="stable")[:m]
    W = evecs[:, order]
    # fix the sign of each direction for determinism
    W *= np.where(W[np.abs(W).argmax(0), np.arange(m)] < 0, -1.0, 1.0)
    V = Xc @ W
    if iters == 0:
        R = np.eye(m)
        history = ()
    else:
        R = _random_rotation(m, np.random.default_rng(seed))
        hist = []
        for _ in range(iters):
            B = np.where(V @ R >= 0, 1.0, -1.0)
            hist.append(float(((B - V @ R) ** 2).sum()))
            U, _, Vt = np.linalg.svd(V.T @ B)
            R = U @ Vt
        history = tuple(hist)
    return ITQModel(
        mean=mean.astype(np.float32),
        pca=W.astype(np.float32),
        rotation=R.astype(np.float32),
        objective_history=history,
    )


def binary_encode(model: ITQModel, X) -> CodeArray:
    """Bit i is 1 when ``u_i^T (x - mean) >= 0`` (sign(0) = +1), else 0."""
    X = as_matrix(X)
    if X.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {X.shape[1]}")
    return pack_codes((model.project(X) >= 0).astype(np.int64), 1)
