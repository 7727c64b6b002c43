"""Exhaustive compressed-domain search, re-ranking and recall measurement."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CodeArray, as_matrix
from .encoders import PQModel


@dataclass
class SearchResult:
    """Top-R ids and estimated squared distances per query, ascending, plus per-phase seconds."""

    ids: np.ndarray
    distances: np.ndarray
    timing: dict = field(default_factory=dict)

    @property
    def nq(self) -> int:
        return self.ids.shape[0]

    @property
    def R(self) -> int:
        return self.ids.shape[1]


def topk(dists: np.ndarray, R: int) -> np.ndarray:
    """Ids of the ``R`` smallest distances, ascending, ties to the lower id."""
    n = dists.shape[0]
    if R >= n:
        return np.argsort(dists, kind="stable")
    part = np.argpartition(dists, R - 1)[:R]
    thr = dists[part].max()
    cand = np.flatnonzero(dists <= thr)
    return cand[np.argsort(dists[cand], kind="stable")[:R]]


def _collect(per_query: list[tuple[np.ndarray, np.ndarray]], R: int) -> tuple[np.ndarray, np.ndarray]:
    nq = len(per_query)
    ids = np.full((nq, R), -1, np.int64)
    dists = np.full((nq, R), np.inf)
    for q, (i, d) in enumerate(per_query):
        ids[q, : len(i)] = i
        dists[q, : len(d)] = d
    return ids, dists


def pq_distance_tables(model: PQModel, queries: np.ndarray) -> np.ndarray:
    """``(nq, m, ksub)`` squared distances from each rotated query slice to each sub-centroid."""
    Q = model.rotate(as_matrix(queries)).astype(np.float64)
    cents = model.codebook.centroids.astype(np.float64)
    m, _, dsub = cents.shape
    qs = Q.reshape(Q.shape[0], m, dsub)
    diff = qs[:, :, None, :] - cents[None]
    return (diff * diff).sum(-1)


def adc_distances(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sum of m table lookups per code, float64."""
    acc = np.zeros(idx.shape[0], np.float64)
    for i in range(table.shape[0]):
        acc += table[i][idx[:, i]]
    return acc


def adc_scan_pq(queries, model: PQModel, codes: CodeArray, R: int, idx: np.ndarray | None = None) -> SearchResult:
    """Asymmetric distance scan over PQ/OPQ codes through per-query lookup tables.

    ``idx`` may pass the already-unpacked code table to skip unpacking.
    """
    Q = as_matrix(queries)
    if Q.shape[1] != model.dim:
        raise ValueError(f"query dimension {Q.shape[1]} != model dimension {model.dim}")
    if codes.m != model.m or codes.bits != model.bits:
        raise ValueError("codes do not match the model")
    if idx is None:
        idx = codes.unpack()
    t0 = time.perf_counter()
    out = []
    for s in range(0, Q.shape[0], 64):
        tables = pq_distance_tables(model, Q[s : s + 64])
        for table in tables:
            d = adc_distances(table, idx)
            top = topk(d, R)
            out.append((top, d[top]))
    ids, dists = _collect(out, min(R, codes.n))
    return SearchResult(ids, dists, {"scan": time.perf_counter() - t0})


def _words(codes: CodeArray) -> np.ndarray:
    p = codes.payload
    pad = (-p.shape[1]) % 8
    if pad:
        p = np.concatenate([p, np.zeros((p.shape[0], pad), np.uint8)], axis=1)
    return np.ascontiguousarray(p).view("<u8")


def hamming(a: CodeArray, b: CodeArray) -> np.ndarray:
    """Row-aligned Hamming distances; a single-row ``a`` is compared with every row of ``b``."""
    if a.m != b.m or a.bits != 1 or b.bits != 1:
        raise ValueError("hamming needs 1-bit codes of equal length")
    return np.bitwise_count(_words(a) ^ _words(b)).sum(1, dtype=np.int64)


def sdc_scan_binary(query_codes: CodeArray, codes: CodeArray, R: int) -> SearchResult:
    """Rank database codes by Hamming distance (XOR + popcount on 64-bit words)."""
    if query_codes.bits != 1 or codes.bits != 1:
        raise ValueError("symmetric binary scan needs 1-bit codes")
    if query_codes.m != codes.m:
        raise ValueError(f"code length mismatch: {query_codes.m} vs {codes.m}")
    wq, wb = _words(query_codes), _words(codes)
    t0 = time.perf_counter()
    out = []
    for q in range(wq.shape[0]):
        d = np.bitwise_count(wb ^ wq[q]).sum(1, dtype=np.int64).astype(np.float64)
        top = topk(d, R)
        out.append((top, d[top]))
    ids, dists = _collect(out, min(R, codes.n))
    return SearchResult(ids, dists, {"scan": time.perf_counter() - t0})


def adc_scan_decoded(queries, reconstructions, R: int, block: int = 65536) -> SearchResult:
    """Exact squared-Euclidean ranking of explicit reconstructions (float64)."""
    Q = as_matrix(queries)
    Y = np.asarray(reconstructions, dtype=np.float32)
    if Y.ndim != 2 or Y.shape[1] != Q.shape[1]:
        raise ValueError(f"reconstruction dimension {Y.shape} does not match queries {Q.shape}")
    n = Y.shape[0]
    cached = Y.astype(np.float64) if n * Y.shape[1] <= (1 << 25) else None
    qchunk = max(1, min(256, (1 << 24) // max(n, 1)))
    t0 = time.perf_counter()
    out = []
    for s in range(0, Q.shape[0], qchunk):
        qb = Q[s : s + qchunk].astype(np.float64)
        D = np.empty((qb.shape[0], n))
        for b in range(0, n, block):
            yb = cached[b : b + block] if cached is not None else Y[b : b + block].astype(np.float64)
            D[:, b : b + block] = (qb * qb).sum(1)[:, None] - 2.0 * qb @ yb.T + (yb * yb).sum(1)[None, :]
        np.maximum(D, 0, out=D)
        for d in D:
            top = topk(d, R)
            out.append((top, d[top]))
    ids, dists = _collect(out, min(R, n))
    return SearchResult(ids, dists, {"scan": time.perf_counter() - t0})


def rerank(
    queries,
    first_stage: SearchResult,
    strong: np.ndarray | Callable[[np.ndarray], np.ndarray],
    L: int,
) -> SearchResult:
    """Re-order the top ``L`` of each first-stage list by exact distance to stronger reconstructions.

    ``strong`` is either the full reconstruction matrix or a callable mapping
    database ids to their reconstructions. Entries beyond ``L`` keep their
    first-stage order and distances.
    """
    if L < 1:
        raise ValueError("shortlist size L must be >= 1")
    if L > first_stage.R:
        raise ValueError(f"L={L} exceeds the first-stage list length {first_stage.R}")
    Q = as_matrix(queries)
    decode = strong if callable(strong) else (lambda ids: np.asarray(strong)[ids])
    ids = first_stage.ids.copy()
    dists = first_stage.distances.copy()
    t0 = time.perf_counter()
    short = ids[:, :L]
    recons = np.asarray(decode(short.ravel()), dtype=np.float64).reshape(Q.shape[0], L, -1)
    d = ((recons - Q.astype(np.float64)[:, None, :]) ** 2).sum(-1)
    order = np.lexsort((short, d), axis=1)
    ids[:, :L] = np.take_along_axis(short, order, 1)
    dists[:, :L] = np.take_along_axis(d, order, 1)
    timing = dict(first_stage.timing)
    timing["rerank"] = time.perf_counter() - t0
    return SearchResult(ids, dists, timing)


def groundtruth(base, queries, k: int = 1) -> np.ndarray:
    """Exact k nearest database ids per query (float64 distances, ties to the lower id)."""
    return adc_scan_decoded(queries, base, k).ids


def recall_at(result: SearchResult | np.ndarray, gt, R: int) -> float:
    """Fraction of queries whose true nearest neighbour is among the first ``R`` results."""
    ids = result.ids if isinstance(result, SearchResult) else np.asarray(result)
    if gt is None:
        raise ValueError("ground truth is missing")
    gt = np.asarray(gt)
    if gt.ndim == 2:
        gt = gt[:, 0]
    if gt.shape[0] != ids.shape[0]:
        raise ValueError(f"{gt.shape[0]} ground-truth rows for {ids.shape[0]} queries")
    if ids.shape[1] < R:
        raise ValueError(f"results hold {ids.shape[1]} entries per query, need {R}")
    return float((ids[:, :R] == gt[:, None]).any(1).mean())


def median_time(fn: Callable[[], object], reps: int = 5) -> tuple[float, object]:
    """Median wall-clock seconds of ``reps`` calls, and the last return value."""
    times = []
    out = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


RESULT_FIELDS = ("query_id", "rank", "db_id", "distance")


def write_results_csv(result: SearchResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for q in range(result.nq):
            for r in range(result.R):
                w.writerow([q, r, int(result.ids[q, r]), repr(float(result.distances[q, r]))])
