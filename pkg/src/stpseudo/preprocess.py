"""Count normalization, PCA embedding and kNN graph construction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist
from threadpoolctl import threadpool_limits

from .errors import ValidationError
from .ingest import ExpressionMatrix

DEFAULT_TARGET_SUM = 1e4
DEFAULT_N_COMPONENTS = 50
DEFAULT_K = 15


def normalize_log(matrix: ExpressionMatrix | sp.spmatrix | np.ndarray,
                  target_sum: float = DEFAULT_TARGET_SUM) -> np.ndarray:
    """Scale every cell to ``target_sum`` total counts, then ``log1p``.

    All-zero cells stay all-zero.
    """
    if not target_sum > 0:
        raise ValidationError(f"target_sum must be positive, got {target_sum}")
    counts = matrix.counts if isinstance(matrix, ExpressionMatrix) else matrix
    dense = counts.toarray() if sp.issparse(counts) else np.asarray(counts)
    dense = dense.astype(np.float64)
    totals = dense.sum(axis=1, keepdims=True)
    scale = np.divide(target_sum, totals, out=np.zeros_like(totals), where=totals > 0)
    return np.log1p(dense * scale)


@dataclass(frozen=True, eq=False)
class Embedding:
    """PCA coordinates of cells.

    ``components`` has shape ``(dims, n_kept_genes)``; ``gene_mask`` marks
    the genes that had non-zero variance and entered the decomposition.
    """

    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    gene_mask: np.ndarray
    total_variance: float

    @property
    def n_cells(self) -> int:
        return self.coordinates.shape[0]

    @property
    def dims(self) -> int:
        return self.coordinates.shape[1]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance

    def reconstruct(self) -> np.ndarray:
        """Back-project into the full gene space (dropped genes get their mean)."""
        out = np.tile(self.mean, (self.n_cells, 1)).astype(float)
        out[:, self.gene_mask] += self.coordinates @ self.components
        return out


def pca(normalized: np.ndarray, n_components: int = DEFAULT_N_COMPONENTS, seed: int = 0) -> Embedding:
    """Exact PCA via thin SVD of the column-centered matrix.

    Zero-variance genes are dropped first. Each component is flipped so its
    largest-magnitude loading is positive. ``seed`` is accepted for interface
    stability; the decomposition is exact and uses no randomness.
    """
    x = np.asarray(normalized, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("pca expects a 2-D matrix")
    n_cells, n_genes = x.shape
    if n_components < 1:
        raise ValidationError("n_components must be >= 1")
    if n_components > min(n_cells, n_genes):
        raise ValidationError(
            f"n_components={n_components} exceeds min(n_cells, n_genes)={min(n_cells, n_genes)}"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    mask = np.ptp(x, axis=0) > 0
    kept = centered[:, mask]
    if n_components > kept.shape[1]:
        raise ValidationError(
            f"n_components={n_components} exceeds the {kept.shape[1]} genes with non-zero variance"
        )
    # single-threaded BLAS keeps results bit-identical regardless of --threads
    with threadpool_limits(limits=1):
        u, s, vt = np.linalg.svd(kept, full_matrices=False)
    u, s, vt = u[:, :n_components], s[:n_components], vt[:n_components]
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), pivot])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    coords = u * (s * signs)[None, :]
    denom = max(n_cells - 1, 1)
    total = float((kept**2).sum() / denom)
    return Embedding(coords, vt, s**2 / denom, mean, mask, total if total > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Simple undirected graph; ``edges`` is an ``(m, 2)`` array with u < v."""

    n_nodes: int
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        e = self.edges
        if len(e):
            if np.any(e[:, 0] >= e[:, 1]):
                raise ValidationError("edges must satisfy u < v (no self-loops)")
            if e.min() < 0 or e.max() >= self.n_nodes:
                raise ValidationError("edge endpoint out of range")
            if len(np.unique(e[:, 0] * self.n_nodes + e[:, 1])) != len(e):
                raise ValidationError("duplicate edge")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValidationError("edge weights must be finite and positive")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def degrees(self) -> np.ndarray:
        """Unweighted node degrees."""
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def adjacency(self) -> sp.csr_matrix:
        u, v = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix(
            (np.concatenate([self.weights, self.weights]), (np.concatenate([u, v]), np.concatenate([v, u]))),
            shape=(self.n_nodes, self.n_nodes),
        )
        return a.tocsr()

    @classmethod
    def from_edges(cls, n_nodes: int, pairs, weights=None) -> "NeighborGraph":
        """Build from arbitrary ``(u, v)`` pairs; orders endpoints and sorts."""
        p = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        p = np.sort(p, axis=1)
        w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
        order = np.lexsort((p[:, 1], p[:, 0]))
        return cls(n_nodes, p[order], w[order])


def knn_graph(embedding: Embedding | np.ndarray, k: int = DEFAULT_K, chunk: int = 2048) -> NeighborGraph:
    """Union-symmetrized k-nearest-neighbor graph with unit weights.

    Distance ties are resolved toward the smaller node index.
    """
    x = embedding.coordinates if isinstance(embedding, Embedding) else np.asarray(embedding, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValidationError("knn_graph needs at least 2 cells")
    if not 1 <= k < n:
        raise ValidationError(f"k must satisfy 1 <= k < n_cells ({n}), got {k}")
    src, dst = [], []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = cdist(x[start:stop], x, metric="sqeuclidean")
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # stable sort on (distance) keeps the lower index first among ties
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
        src.append(np.repeat(np.arange(start, stop), k))
        dst.append(nbrs.ravel())
    pairs = np.stack([np.concatenate(src), np.concatenate(dst)], axis=1)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    return NeighborGraph(n, pairs, np.ones(len(pairs)))


# --------------------------------------------------------------------------
# dumps


def write_embedding(embedding: Embedding, path) -> Path:
    """Little-endian float64 row-major dump plus ``<path>.json`` {rows, cols}."""
    path = Path(path)
    coords = np.ascontiguousarray(embedding.coordinates, dtype="<f8")
    path.write_bytes(coords.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"rows": coords.shape[0], "cols": coords.shape[1]}) + "\n")
    return path


def read_embedding(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f8")
    if arr.size != meta["rows"] * meta["cols"]:
        raise ValidationError(f"{path}: size does not match sidecar {meta}")
    return arr.reshape(meta["rows"], meta["cols"]).astype(np.float64)


def write_edges(graph: NeighborGraph, path) -> Path:
    path = Path(path)
    lines = ["u\tv\tweight"]
    lines += [f"{int(u)}\t{int(v)}\t{float(w)!r}" for (u, v), w in zip(graph.edges, graph.weights)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_edges(path, n_nodes: int) -> NeighborGraph:
    pairs, weights = [], []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if lineno == 1 or not ln.strip():
            continue
        u, v, w = ln.split("\t")
        pairs.append((int(u), int(v)))
        weights.append(float(w))
    return NeighborGraph.from_edges(n_nodes, pairs, weights)
