"""Leiden community detection under the RB-Potts (resolution-scaled modularity) objective.

The three phases follow Traag, Waltman & van Eck (2019): fast local moving,
refinement of each community into well-connected sub-communities, and
aggregation of the refined partition, with the non-refined partition used as
the starting point on the aggregate graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .preprocess import NeighborGraph

OBJECTIVE = "RBConfiguration"
DEFAULT_RESOLUTION = 4.0
DEFAULT_MAX_ITERATIONS = 100
# refinement randomness; leidenalg's default
THETA = 0.01
_EPS = 1e-10


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    resolution: float
    seed: int
    quality: float
    n_iterations: int = 0
    objective: str = field(default=OBJECTIVE)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def quality(graph: NeighborGraph, labels: Sequence[int], resolution: float = 1.0) -> float:
    """RB-Potts modularity ``(1/2m) sum_ij [A_ij - g k_i k_j / 2m] delta(c_i, c_j)``.

    Zero for a graph without edges.
    """
    labels = np.asarray(labels)
    if len(labels) != graph.n_nodes:
        raise ValidationError(f"{len(labels)} labels for {graph.n_nodes} nodes")
    m = float(graph.weights.sum())
    if m == 0.0:
        return 0.0
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    internal = float(graph.weights[labels[u] == labels[v]].sum())
    strength = np.zeros(graph.n_nodes)
    np.add.at(strength, u, graph.weights)
    np.add.at(strength, v, graph.weights)
    _, inv = np.unique(labels, return_inverse=True)
    comm = np.bincount(inv, weights=strength)
    return internal / m - resolution * float((comm**2).sum()) / (2.0 * m) ** 2


class _Graph:
    """Weighted graph with self-loops; ``loops[i]`` holds ``A_ii`` (twice the internal weight)."""

    def __init__(self, adj: sp.csr_matrix, loops: np.ndarray, total_weight: float):
        self.n = adj.shape[0]
        self.adj = adj
        self.loops = loops
        self.strength = np.asarray(adj.sum(axis=1)).ravel() + loops
        self.two_m = 2.0 * total_weight
        self.nbrs = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(self.n)]
        self.wts = [adj.data[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(self.n)]

    @classmethod
    def from_neighbor_graph(cls, graph: NeighborGraph) -> "_Graph":
        adj = graph.adjacency()
        adj.sort_indices()
        return cls(adj, np.zeros(graph.n_nodes), float(graph.weights.sum()))

    def aggregate(self, partition: np.ndarray) -> "_Graph":
        n_comm = int(partition.max()) + 1
        p = sp.csr_matrix((np.ones(self.n), (np.arange(self.n), partition)), shape=(self.n, n_comm))
        full = self.adj + sp.diags(self.loops)
        agg = (p.T @ full @ p).tocsr()
        loops = agg.diagonal().copy()
        agg.setdiag(0)
        agg.eliminate_zeros()
        agg.sort_indices()
        return _Graph(agg, loops, self.two_m / 2.0)


def _renumber(membership: np.ndarray) -> np.ndarray:
    """Dense ids in order of first appearance."""
    _, first, inv = np.unique(membership, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inv].astype(np.int64)


def _move_nodes(g: _Graph, memb: np.ndarray, gamma: float, rng: np.random.Generator) -> int:
    """Fast local moving; mutates ``memb`` in place and returns the move count."""
    n = g.n
    comm_strength = np.bincount(memb, weights=g.strength, minlength=n).tolist()
    comm_size = np.bincount(memb, minlength=n).tolist()
    empty = [c for c in range(n - 1, -1, -1) if comm_size[c] == 0]
    scale = gamma / g.two_m
    strength = g.strength.tolist()
    memb_l = memb.tolist()
    queue = deque(rng.permutation(n).tolist())
    queued = [True] * n
    moves = 0
    while queue:
        v = queue.popleft()
        queued[v] = False
        cur = memb_l[v]
        k = strength[v]
        w_to: dict[int, float] = {}
        for u, w in zip(g.nbrs[v], g.wts[v]):
            c = memb_l[u]
            w_to[c] = w_to.get(c, 0.0) + w
        comm_strength[cur] -= k
        comm_size[cur] -= 1
        best = cur
        best_gain = w_to.get(cur, 0.0) - scale * k * comm_strength[cur]
        for c, w in w_to.items():
            gain = w - scale * k * comm_strength[c]
            if gain > best_gain + _EPS:
                best, best_gain = c, gain
        if comm_size[cur] > 0 and best_gain < -_EPS:
            # an empty community (gain 0) beats every option
            best = empty.pop()
        comm_strength[best] += k
        comm_size[best] += 1
        if best != cur:
            if comm_size[cur] == 0:
                empty.append(cur)
            memb_l[v] = best
            moves += 1
            for u in g.nbrs[v]:
                if not queued[u] and memb_l[u] != best:
                    queued[u] = True
                    queue.append(u)
    memb[:] = memb_l
    return moves


def _refine(g: _Graph, memb: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Split every community of ``memb`` into well-connected sub-communities."""
    n = g.n
    scale = gamma / g.two_m
    strength = g.strength.tolist()
    memb_l = memb.tolist()
    refined = list(range(n))
    ref_strength = list(strength)
    ref_size = [1] * n
    # external weight of each refined community towards the rest of its parent
    ext = [0.0] * n
    for v in range(n):
        cv = memb_l[v]
        ext[v] = sum(w for u, w in zip(g.nbrs[v], g.wts[v]) if memb_l[u] == cv)
    comm_total = np.bincount(memb, weights=g.strength).tolist()

    for v in rng.permutation(n).tolist():
        if ref_size[refined[v]] != 1:
            continue
        cv = memb_l[v]
        k = strength[v]
        k_s = comm_total[cv]
        if ext[v] < scale * k * (k_s - k) - _EPS:
            continue
        w_to: dict[int, float] = {}
        for u, w in zip(g.nbrs[v], g.wts[v]):
            if memb_l[u] == cv:
                r = refined[u]
                w_to[r] = w_to.get(r, 0.0) + w
        own = refined[v]
        cands = [own]
        gains = [0.0]
        for r, w in w_to.items():
            if r == own:
                continue
            if ext[r] < scale * ref_strength[r] * (k_s - ref_strength[r]) - _EPS:
                continue
            gain = w - scale * k * ref_strength[r]
            if gain >= 0.0:
                cands.append(r)
                gains.append(gain)
        if len(cands) == 1:
            continue
        g_arr = np.asarray(gains)
        p = np.exp((g_arr - g_arr.max()) / THETA)
        p /= p.sum()
        pick = cands[int(rng.choice(len(cands), p=p))]
        if pick == own:
            continue
        ref_strength[own] -= k
        ref_size[own] -= 1
        ext[pick] = ext[pick] + ext[own] - 2.0 * w_to[pick]
        ref_strength[pick] += k
        ref_size[pick] += 1
        refined[v] = pick
    return np.asarray(refined, dtype=np.int64)


def _leiden_pass(base: _Graph, membership: np.ndarray, gamma: float, rng) -> tuple[np.ndarray, int]:
    g = base
    memb = membership.copy()
    node_map = np.arange(base.n)
    total_moves = 0
    while True:
        total_moves += _move_nodes(g, memb, gamma, rng)
        memb = _renumber(memb)
        n_comm = int(memb.max()) + 1
        if n_comm == g.n:
            break
        refined = _renumber(_refine(g, memb, gamma, rng))
        if int(refined.max()) + 1 == g.n:
            refined = memb
        agg_memb = np.zeros(int(refined.max()) + 1, dtype=np.int64)
        agg_memb[refined] = memb
        node_map = refined[node_map]
        g = g.aggregate(refined)
        memb = agg_memb
    return memb[node_map], total_moves


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters by size (descending), ties by smallest member."""
    ids, first, counts = np.unique(labels, return_index=True, return_counts=True)
    order = np.lexsort((first, -counts))
    remap = np.empty(len(ids), dtype=np.int64)
    remap[order] = np.arange(len(ids))
    return remap[np.searchsorted(ids, labels)]


def leiden(graph: NeighborGraph, resolution: float = DEFAULT_RESOLUTION, seed: int = 0,
           max_iterations: int = DEFAULT_MAX_ITERATIONS) -> ClusterAssignment:
    """Partition ``graph`` by iterating Leiden passes until no node moves.

    Labels are 0-based and ordered by cluster size.
    """
    if graph.n_nodes < 1:
        raise ValidationError("leiden needs a non-empty graph")
    if not resolution > 0:
        raise ValidationError(f"resolution must be positive, got {resolution}")
    rng = np.random.default_rng(seed)
    base = _Graph.from_neighbor_graph(graph)
    membership = np.arange(graph.n_nodes, dtype=np.int64)
    it = 0
    if base.two_m > 0:
        for it in range(1, max_iterations + 1):
            membership, moved = _leiden_pass(base, membership, resolution, rng)
            if not moved:
                break
    labels = _canonical(membership)
    return ClusterAssignment(labels, float(resolution), int(seed),
                             quality(graph, labels, resolution), it)


def write_assignment(assignment: ClusterAssignment, cell_ids: Sequence[str], path) -> Path:
    path = Path(path)
    lines = ["cell_id\tcluster"] + [f"{c}\t{int(k)}" for c, k in zip(cell_ids, assignment.labels)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_assignment(path, cell_ids: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    ids, labels = [], []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if lineno == 1 or not ln.strip():
            continue
        cid, k = ln.split("\t")
        ids.append(cid)
        labels.append(int(k))
    if cell_ids is not None and list(cell_ids) != ids:
        raise ValidationError(f"{path}: cell ids do not match the aligned dataset")
    return ids, np.asarray(labels, dtype=np.int64)
