"""Two-level hierarchical-clustering ANN index over unit embeddings.

Level one is spherical k-means (assignment by maximum inner product,
centroids renormalised after every update); level two is a flat posting list
per centroid. A query probes the ``nprobe`` best-scoring centroids and ranks
their members exactly. Results are ordered by score descending, then by
product id ascending.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

INDEX_MAGIC = b"HCI1"
EMBEDDING_MAGIC = b"EMB1"


class IndexConfigError(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    ids: np.ndarray  # (N,) int64
    vectors: np.ndarray  # (N, D) float32, unit rows

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise IndexConfigError("ids and vectors must have matching lengths")
        if len(np.unique(self.ids)) != len(self.ids):
            raise IndexConfigError("duplicate product ids in embedding matrix")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def scores(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    # row-wise float64 products; one row's score never depends on its neighbours
    return (rows.astype(np.float64) * np.asarray(query, dtype=np.float64)).sum(axis=1)


def rank(ids: np.ndarray, row_scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.lexsort((ids, -row_scores))[:k]
    return [(int(ids[i]), float(row_scores[i])) for i in order]


def brute_force(embeddings: EmbeddingMatrix, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-``k`` by inner product."""
    if k < 1:
        raise IndexConfigError("k must be >= 1")
    return rank(embeddings.ids, scores(embeddings.vectors, query), k)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def spherical_kmeans(x: np.ndarray, n_clusters: int, iters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(centroids, assignment)`` for unit rows ``x``.

    Empty clusters are re-seeded with the member of the largest cluster that
    is farthest (lowest similarity) from that cluster's centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    rng = np.random.default_rng(seed)
    centroids = x[np.sort(rng.choice(n, size=n_clusters, replace=False))].copy()
    assign = np.argmax(x @ centroids.T, axis=1)
    for _ in range(iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            sim_to_own = x[members] @ _normalize_rows(sums[big:big + 1])[0]
            far = members[int(np.argmin(sim_to_own))]
            assign[far] = c
            sums[big] -= x[far]
            sums[c] = x[far]
            counts[big] -= 1
            counts[c] = 1
        centroids = _normalize_rows(sums)
        new_assign = np.argmax(x @ centroids.T, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids, assign


class HCIndex:
    def __init__(self, centroids: np.ndarray, lists: Sequence[EmbeddingMatrix], nprobe: int | None = None):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.lists = list(lists)
        if len(self.lists) != len(self.centroids):
            raise IndexFormatError("one posting list per centroid required")
        self.nprobe = nprobe if nprobe is not None else default_nprobe(len(self.centroids))

    @property
    def n_lists(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __len__(self) -> int:
        return sum(len(pl) for pl in self.lists)

    def list_sizes(self) -> list[int]:
        return [len(pl) for pl in self.lists]

    def probe_order(self, query: np.ndarray) -> np.ndarray:
        s = scores(self.centroids, query)
        return np.lexsort((np.arange(len(s)), -s))

    def search(self, query: np.ndarray, k: int, nprobe: int | None = None) -> list[tuple[int, float]]:
        """Top-``k`` ``(product_id, score)`` from the ``nprobe`` closest lists."""
        nprobe = self.nprobe if nprobe is None else nprobe
        if not 1 <= nprobe <= self.n_lists:
            raise IndexConfigError(f"nprobe must be in [1, {self.n_lists}], got {nprobe}")
        if k < 1:
            raise IndexConfigError("k must be >= 1")
        probed = [self.lists[c] for c in self.probe_order(query)[:nprobe]]
        probed = [pl for pl in probed if len(pl)]
        if not probed:
            return []
        ids = np.concatenate([pl.ids for pl in probed])
        rows = np.concatenate([pl.vectors for pl in probed])
        return rank(ids, scores(rows, query), k)

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [INDEX_MAGIC, struct.pack("<3I", self.dim, self.n_lists, len(self))]
        parts.append(self.centroids.astype("<f4").tobytes())
        parts.append(np.array(self.list_sizes(), dtype="<u4").tobytes())
        for pl in self.lists:
            for pid, row in zip(pl.ids, pl.vectors):
                parts.append(struct.pack("<q", int(pid)))
                parts.append(row.astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, nprobe: int | None = None) -> "HCIndex":
        if data[:4] != INDEX_MAGIC:
            raise IndexFormatError(f"bad index magic {data[:4]!r}")
        D, C, N = struct.unpack_from("<3I", data, 4)
        off = 16
        need = off + 4 * C * D + 4 * C + N * (8 + 4 * D)
        if len(data) != need:
            raise IndexFormatError(f"index size {len(data)} != expected {need}")
        centroids = np.frombuffer(data, dtype="<f4", count=C * D, offset=off).reshape(C, D)
        off += 4 * C * D
        sizes = np.frombuffer(data, dtype="<u4", count=C, offset=off)
        off += 4 * C
        row_dtype = np.dtype([("id", "<i8"), ("vec", "<f4", (D,))])
        rows = np.frombuffer(data, dtype=row_dtype, count=N, offset=off)
        lists, start = [], 0
        for size in sizes:
            chunk = rows[start:start + int(size)]
            lists.append(EmbeddingMatrix(chunk["id"].copy(), chunk["vec"].copy()))
            start += int(size)
        return cls(centroids.copy(), lists, nprobe)

    @classmethod
    def load(cls, path: str | Path, nprobe: int | None = None) -> "HCIndex":
        return cls.from_bytes(Path(path).read_bytes(), nprobe)


def default_n_lists(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def default_nprobe(n_lists: int) -> int:
    return max(1, math.ceil(math.sqrt(n_lists)))


def build(
    embeddings: EmbeddingMatrix,
    n_lists: int | None = None,
    iters: int = 20,
    seed: int = 0,
    nprobe: int | None = None,
) -> HCIndex:
    """Cluster ``embeddings`` into ``n_lists`` posting lists (default ceil(sqrt(N))).

    Raises:
        IndexConfigError: ``n_lists`` outside ``[1, N]``.
    """
    n = len(embeddings)
    n_lists = default_n_lists(n) if n_lists is None else n_lists
    if not 1 <= n_lists <= n:
        raise IndexConfigError(f"centroid count must be in [1, {n}], got {n_lists}")
    centroids, assign = spherical_kmeans(embeddings.vectors, n_lists, iters, seed)
    lists = []
    for c in range(n_lists):
        members = np.flatnonzero(assign == c)
        members = members[np.argsort(embeddings.ids[members], kind="stable")]
        lists.append(EmbeddingMatrix(embeddings.ids[members], embeddings.vectors[members]))
    return HCIndex(centroids, lists, nprobe)


def save_embeddings(embeddings: EmbeddingMatrix, path: str | Path) -> None:
    """``EMB1``, (N, D) as u32, N int64 ids, then row-major float32 vectors."""
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<2I", len(embeddings), embeddings.dim))
        fh.write(embeddings.ids.astype("<i8").tobytes())
        fh.write(embeddings.vectors.astype("<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise IndexFormatError(f"bad embedding magic {data[:4]!r}")
    N, D = struct.unpack_from("<2I", data, 4)
    if len(data) != 12 + 8 * N + 4 * N * D:
        raise IndexFormatError("embedding file size does not match header")
    ids = np.frombuffer(data, dtype="<i8", count=N, offset=12)
    vecs = np.frombuffer(data, dtype="<f4", count=N * D, offset=12 + 8 * N).reshape(N, D)
    return EmbeddingMatrix(ids.copy(), vecs.copy())


def recall_vs_exact(approx: Sequence[tuple[int, float]], exact: Sequence[tuple[int, float]]) -> float:
    truth = {pid for pid, _ in exact}
    return len(truth & {pid for pid, _ in approx}) / len(truth) if truth else 1.0
