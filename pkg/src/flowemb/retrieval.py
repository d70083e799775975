"""Exact cosine k-NN over an embedding database, and neighborhood voting."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_K = 20
DB_BLOCK = 4096
QUERY_BLOCK = 256
SCAN_GROUPS = 64
NORM_TOL = 1e-5
# far above the float64 rounding error of a BLAS dot product of unit vectors
SHORTLIST_SLACK = 1e-9

SCHEMES = {"top1": 1, "maj3": 3, "maj5": 5}


@dataclass
class EmbeddingDB:
    """Unit-norm database vectors with class labels, in insertion order."""

    vectors: np.ndarray
    labels: np.ndarray
    names: list[str] | None = None

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ValueError("an embedding database needs at least one row")
        if len(self.labels) != len(self.vectors):
            raise ValueError("labels and vectors differ in length")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1) > NORM_TOL):
            raise ValueError("database rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class Neighborhoods:
    """Rank output for ``q`` queries: ``indices[q, k]`` and ``similarities[q, k]``.

    Rows are sorted by descending similarity, ties by ascending db index.
    """

    indices: np.ndarray
    similarities: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def entries(self, i: int) -> list[tuple[int, float]]:
        return list(zip(self.indices[i].tolist(), self.similarities[i].tolist()))


def _select(rows, idx, sim, q, k, slack):
    """Sort candidates by (query, -similarity, db index) and prune them.

    Keeps each query's first ``k`` entries plus any entry within ``slack`` of
    its k-th similarity. Returns the pruned arrays and the per-query k-th value
    (``-inf`` while a query has fewer than ``k`` candidates).
    """
    order = np.lexsort((idx, -sim, rows))
    rows, idx, sim = rows[order], idx[order], sim[order]
    starts = np.searchsorted(rows, np.arange(q))
    pos = np.arange(len(rows)) - starts[rows]
    full = np.bincount(rows, minlength=q) >= k
    kth = np.full(q, -np.inf)
    kth[full] = sim[starts[full] + k - 1]
    keep = (pos < k) | (sim >= (kth - slack)[rows])
    return rows[keep], idx[keep], sim[keep], kth


def _above(sims: np.ndarray, thr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``np.nonzero(sims >= thr[:, None])`` without scanning every entry.

    Columns are grouped by residue modulo ``SCAN_GROUPS``; only groups whose
    maximum clears the row threshold are scanned. Output order may differ
    from ``np.nonzero``.
    """
    q, n_b = sims.shape
    g = SCAN_GROUPS
    if n_b % g == 0 and n_b >= 4 * g:
        strided = sims.reshape(q, n_b // g, g)
        pr, pg = np.nonzero(strided.max(axis=1) >= thr[:, None])
        if 4 * len(pr) < q * g:
            i, t = np.nonzero(strided[pr, :, pg] >= thr[pr, None])
            return pr[i], t * g + pg[i]
    return np.nonzero(sims >= thr[:, None])


def _rank_block(queries, db, k, db_block, score_fn, rescore_fn, slack):
    q = len(queries)
    rows = np.empty(0, dtype=np.int64)
    idx = np.empty(0, dtype=np.int64)
    sim = np.empty(0, dtype=np.float64)
    thr = np.full(q, -np.inf)
    # new candidates are buffered and merged in batches; a stale threshold only admits extra rows
    pending: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    n_pending = 0
    for start in range(0, len(db), db_block):
        sims = score_fn(queries, db[start:start + db_block])
        r, c = _above(sims, thr)
        if len(r) > 2 * k * q and sims.shape[1] > k:
            kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1]
            keep = sims[r, c] >= (kth - slack)[r]
            r, c = r[keep], c[keep]
        if len(r):
            pending.append((r, c + start, sims[r, c]))
            n_pending += len(r)
        last = start + db_block >= len(db)
        if pending and (n_pending > 2 * k * q or last):
            rows, idx, sim, kth = _select(
                np.concatenate([rows, *(p[0] for p in pending)]),
                np.concatenate([idx, *(p[1] for p in pending)]),
                np.concatenate([sim, *(p[2] for p in pending)]), q, k, slack)
            thr = kth - slack
            pending, n_pending = [], 0
    if rescore_fn is not None:
        sim = rescore_fn(queries, db, rows, idx)
        rows, idx, sim, _ = _select(rows, idx, sim, q, k, 0.0)
    starts = np.searchsorted(rows, np.arange(q))
    take = np.arange(len(rows)) - starts[rows] < k
    return idx[take].reshape(q, k), sim[take].reshape(q, k)


def tree_sum(p: np.ndarray) -> np.ndarray:
    """Row sums in a fixed pairwise order: fold the second half onto the first until one column is left."""
    while p.shape[1] > 1:
        h = p.shape[1] // 2
        folded = p[:, :h] + p[:, h:2 * h]
        p = np.concatenate([folded, p[:, 2 * h:]], axis=1) if p.shape[1] % 2 else folded
    return p[:, 0]


def canonical_dots(queries, db, rows, cols, chunk=65536) -> np.ndarray:
    """Float64 dot products of the float32 pairs ``(queries[rows], db[cols])``.

    Each float32 product is exact in float64 and the sum uses :func:`tree_sum`,
    so the value never depends on blocking, BLAS kernels or thread counts.
    """
    out = np.empty(len(rows), dtype=np.float64)
    for s in range(0, len(rows), chunk):
        sl = slice(s, s + chunk)
        prod = queries[rows[sl]].astype(np.float64) * db[cols[sl]].astype(np.float64)
        out[sl] = tree_sum(prod) if prod.shape[1] else 0.0
    return out


def cosine_sims(queries: np.ndarray, db_rows: np.ndarray) -> np.ndarray:
    return queries.astype(np.float64) @ db_rows.astype(np.float64).T


def rank(
    db: EmbeddingDB,
    queries: np.ndarray,
    k: int = DEFAULT_K,
    db_block: int = DB_BLOCK,
    query_block: int = QUERY_BLOCK,
) -> Neighborhoods:
    """Exhaustive top-``k`` cosine neighbors of every query row.

    A BLAS product with some slack shortlists candidates; the shortlist is
    rescored with :func:`canonical_dots` and that value is what gets ranked
    and reported. Results therefore do not depend on the block sizes.
    """
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 2 or queries.shape[1] != db.dim:
        raise ValueError(f"queries must have shape (q, {db.dim})")
    return _rank_impl(db.vectors, queries, k, db_block, query_block, cosine_sims, canonical_dots, SHORTLIST_SLACK)


def _rank_impl(db_vectors, queries, k, db_block, query_block, score_fn, rescore_fn=None, slack=0.0) -> Neighborhoods:
    n = len(db_vectors)
    if k > n:
        log.warning("k=%d exceeds database size %d; clamping", k, n)
        k = n
    if k < 1:
        raise ValueError("k must be >= 1")
    if db_block < 1 or query_block < 1:
        raise ValueError("block sizes must be >= 1")
    idx = np.empty((len(queries), k), dtype=np.int64)
    sim = np.empty((len(queries), k), dtype=np.float64)
    for start in range(0, len(queries), query_block):
        sl = slice(start, start + query_block)
        qs = queries[sl]
        scale = np.maximum(1.0, np.linalg.norm(qs.astype(np.float64), axis=1)) if slack else 0.0
        idx[sl], sim[sl] = _rank_block(qs, db_vectors, k, db_block, score_fn, rescore_fn, slack * scale)
    return Neighborhoods(idx, sim)


def _tree_sum_scalar(vals: list[float]) -> float:
    while len(vals) > 1:
        h = len(vals) // 2
        folded = [vals[i] + vals[i + h] for i in range(h)]
        vals = folded + vals[2 * h:]
    return vals[0] if vals else 0.0


def rank_naive(db: EmbeddingDB, queries: np.ndarray, k: int = DEFAULT_K) -> Neighborhoods:
    """Reference ranking: score every (query, row) pair directly and fully sort.

    Small databases go through plain Python floats, larger ones through
    :func:`tree_sum`; both follow the same summation order as :func:`rank`.
    """
    queries = np.asarray(queries, dtype=np.float32)
    k = min(k, len(db))
    dbv = db.vectors.astype(np.float64)
    idx = np.empty((len(queries), k), dtype=np.int64)
    sim = np.empty((len(queries), k), dtype=np.float64)
    for i, qv in enumerate(queries.astype(np.float64)):
        if len(dbv) <= 64:
            s = np.array([_tree_sum_scalar([float(a) * float(b) for a, b in zip(row, qv)]) for row in dbv])
        else:
            s = tree_sum(dbv * qv)
        order = np.lexsort((np.arange(len(s)), -s))[:k]
        idx[i], sim[i] = order, s[order]
    return Neighborhoods(idx, sim)


def vote(labels: Sequence[int], scheme: str = "top1") -> int:
    """Majority label among the first ``w`` neighbors; ties go to the earliest neighbor."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown voting scheme {scheme!r}")
    window = list(labels)[:SCHEMES[scheme]]
    if not window:
        raise ValueError("empty neighborhood")
    counts: dict[int, int] = {}
    for lab in window:
        counts[lab] = counts.get(lab, 0) + 1
    best = max(counts.values())
    return next(lab for lab in window if counts[lab] == best)


def vote_all(nb: Neighborhoods, db_labels: np.ndarray, scheme: str = "top1") -> np.ndarray:
    """Vectorized :func:`vote` over every neighborhood."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown voting scheme {scheme!r}")
    if nb.indices.shape[1] == 0:
        raise ValueError("empty neighborhood")
    lab = np.asarray(db_labels)[nb.indices[:, :SCHEMES[scheme]]]
    if lab.shape[1] == 1:
        return lab[:, 0].copy()
    # count of each window label inside the window
    counts = (lab[:, :, None] == lab[:, None, :]).sum(axis=2)
    first_best = np.argmax(counts == counts.max(axis=1, keepdims=True), axis=1)
    return lab[np.arange(len(lab)), first_best]


def reject_by_distance(entries: Sequence[tuple[int, float]], db_labels: np.ndarray, threshold: float) -> int | None:
    """Top-1 label, or ``None`` when even the closest neighbor is below ``threshold``."""
    if not entries:
        raise ValueError("empty neighborhood")
    if max(s for _, s in entries) < threshold:
        return None
    return int(db_labels[entries[0][0]])
