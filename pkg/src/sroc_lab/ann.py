"""Exact and IVFFlat approximate nearest-neighbor search over vector banks.

Distances are squared Euclidean throughout; callers take square roots only
where a score formula demands it. Ties are broken by lower row index so
results are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, NonFiniteError

KMEANS_MAX_ITERS = 25
KMEANS_REL_TOL = 1e-4


@dataclass
class VectorBank:
    """M x dim matrix plus one opaque payload id per row."""

    vectors: np.ndarray
    payload_ids: tuple

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise InsufficientDataError(
                f"bank must be M x dim, got shape {self.vectors.shape}"
            )
        if len(self.payload_ids) != self.vectors.shape[0]:
            raise InsufficientDataError(
                f"{len(self.payload_ids)} payload ids for {self.vectors.shape[0]} rows"
            )
        if not np.isfinite(self.vectors).all():
            raise NonFiniteError("bank contains non-finite vectors")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class IvfIndex:
    """Coarse k-means quantizer plus inverted lists partitioning the bank."""

    centroids: np.ndarray
    inverted_lists: tuple[np.ndarray, ...]
    nprobe: int

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]


def default_nlist(m: int) -> int:
    return int(np.clip(round(np.sqrt(m)), 1, 1024))


def default_nprobe(nlist: int) -> int:
    return max(1, nlist // 4)


def _sq_distances(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = vectors.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def kmeans_fit(vectors: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ initialization.

    Runs KMEANS_MAX_ITERS iterations or until the relative inertia change
    drops below KMEANS_REL_TOL; an emptied cluster is reseeded to the point
    farthest from its assigned centroid. Deterministic given (vectors, k,
    seed).
    """
    X = np.asarray(vectors, dtype=np.float64)
    m = X.shape[0]
    if m < k:
        raise InsufficientDataError(f"k-means needs M >= k, got M={m}, k={k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(m)]
    closest = _sq_distances(X, centroids[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[j] = X[rng.integers(m)]
        else:
            centroids[j] = X[rng.choice(m, p=closest / total)]
        closest = np.minimum(closest, _sq_distances(X, centroids[j]))

    prev_inertia = None
    for _ in range(KMEANS_MAX_ITERS):
        assign, dists = _assign(X, centroids)
        inertia = dists.sum()
        for j in range(k):
            member = assign == j
            if member.any():
                centroids[j] = X[member].mean(axis=0)
            else:
                farthest = int(np.argmax(dists))
                centroids[j] = X[farthest]
                assign[farthest] = j
                dists[farthest] = 0.0
        if prev_inertia is not None and prev_inertia > 0:
            if abs(prev_inertia - inertia) / prev_inertia < KMEANS_REL_TOL:
                break
        prev_inertia = inertia
    return centroids


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid assignment and the corresponding squared distances."""
    x2 = np.einsum("ij,ij->i", X, X)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    d2 = x2[:, None] + c2[None, :] - 2.0 * X @ centroids.T
    assign = np.argmin(d2, axis=1)
    best = np.maximum(d2[np.arange(X.shape[0]), assign], 0.0)
    return assign, best


def _smallest_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ties resolved toward lower index."""
    return np.argsort(d2, kind="stable")[:k]


def exact_knn(
    bank: VectorBank, query: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """True k nearest bank rows by squared Euclidean distance, ascending."""
    if k < 1 or k > bank.size:
        raise InsufficientDataError(
            f"k must be in [1, {bank.size}], got {k}"
        )
    d2 = np.maximum(_sq_distances(bank.vectors, query), 0.0)
    rows = _smallest_k(d2, k)
    return [(int(r), float(d2[r])) for r in rows]


def ivf_build(bank: VectorBank, nlist: int, seed: int) -> IvfIndex:
    """Cluster the bank with k-means and assign each row to its nearest
    centroid's inverted list."""
    if bank.size == 0:
        raise InsufficientDataError("cannot index an empty bank")
    centroids = kmeans_fit(bank.vectors, nlist, seed)
    assign, _ = _assign(bank.vectors.astype(np.float64), centroids)
    lists = tuple(
        np.flatnonzero(assign == j).astype(np.intp) for j in range(nlist)
    )
    return IvfIndex(
        centroids=centroids,
        inverted_lists=lists,
        nprobe=default_nprobe(nlist),
    )


def ivf_query(
    index: IvfIndex,
    bank: VectorBank,
    query: np.ndarray,
    k: int,
    nprobe: int | None = None,
) -> list[tuple[int, float]]:
    """Exact search restricted to the nprobe nearest inverted lists; scans
    further lists whenever fewer than k candidates were gathered."""
    if bank.size == 0:
        raise InsufficientDataError("cannot query an empty bank")
    if k < 1:
        raise InsufficientDataError(f"k must be >= 1, got {k}")
    nprobe = index.nprobe if nprobe is None else nprobe
    if nprobe < 1 or nprobe > index.nlist:
        raise InsufficientDataError(
            f"nprobe must be in [1, {index.nlist}], got {nprobe}"
        )
    order = np.argsort(_sq_distances(index.centroids, query), kind="stable")
    candidates: list[np.ndarray] = []
    have = 0
    for rank, c in enumerate(order):
        if rank >= nprobe and have >= k:
            break
        rows = index.inverted_lists[c]
        if rows.size:
            candidates.append(rows)
            have += rows.size
    if have < k:
        raise InsufficientDataError(
            f"bank holds {have} vectors in total, need k={k}"
        )
    rows = np.concatenate(candidates)
    rows.sort()  # restore global row order so tie-breaking matches exact_knn
    d2 = np.maximum(_sq_distances(bank.vectors[rows], query), 0.0)
    local = _smallest_k_local(d2, rows, k)
    return [(int(r), float(d)) for r, d in local]


def _smallest_k_local(
    d2: np.ndarray, rows: np.ndarray, k: int
) -> list[tuple[int, float]]:
    # rows are in ascending global order, so a stable sort on d2 reproduces
    # exact_knn's lower-row-index tie rule
    order = np.argsort(d2, kind="stable")[:k]
    return [(rows[i], d2[i]) for i in order]


def exact_knn_batch(
    bank: VectorBank, queries: np.ndarray, k: int, block: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """exact_knn over many queries: returns (rows, sq_dists) of shape Q x k."""
    if k < 1 or k > bank.size:
        raise InsufficientDataError(f"k must be in [1, {bank.size}], got {k}")
    Q = np.asarray(queries, dtype=np.float64)
    V = bank.vectors.astype(np.float64)
    v2 = np.einsum("ij,ij->i", V, V)
    out_rows = np.empty((Q.shape[0], k), dtype=np.intp)
    out_d2 = np.empty((Q.shape[0], k))
    for start in range(0, Q.shape[0], block):
        chunk = Q[start : start + block]
        q2 = np.einsum("ij,ij->i", chunk, chunk)
        d2 = np.maximum(q2[:, None] + v2[None, :] - 2.0 * chunk @ V.T, 0.0)
        for i in range(chunk.shape[0]):
            rows = _smallest_k(d2[i], k)
            out_rows[start + i] = rows
            out_d2[start + i] = d2[i, rows]
    return out_rows, out_d2
