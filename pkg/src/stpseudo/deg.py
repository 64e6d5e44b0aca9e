"""One-vs-rest Wilcoxon rank-sum tests and marker candidate extraction."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ValidationError

logger = logging.getLogger(__name__)

CONTINUITY = 0.5


@dataclass(frozen=True, eq=False)
class DEGTable:
    """Per (cluster, gene) statistics, arrays shaped ``(n_clusters, n_genes)``.

    ``rank`` is 1-based within each cluster by descending ``z`` (ties by gene
    name); rows of ``empty_clusters`` carry NaN statistics and rank 0.
    """

    gene_names: tuple[str, ...]
    z: np.ndarray
    p: np.ndarray
    log_fold_change: np.ndarray
    rank: np.ndarray
    empty_clusters: frozenset[int] = frozenset()

    @property
    def n_clusters(self) -> int:
        return self.z.shape[0]

    def ordered_genes(self, cluster: int) -> list[str]:
        order = np.argsort(self.rank[cluster], kind="stable")
        return [self.gene_names[i] for i in order if self.rank[cluster, i] > 0]


def rank_sum_z(u: np.ndarray, n1, n2, tie_sum) -> tuple[np.ndarray, np.ndarray]:
    """Normal approximation for the Mann-Whitney ``U`` of the first group.

    ``tie_sum`` is ``sum(t**3 - t)`` over tie groups of the pooled sample.
    Returns ``(z, two_sided_p)``; zero variance gives ``z = 0, p = 1``.
    """
    u = np.asarray(u, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    n = n1 + n2
    mu = n1 * n2 / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        var = n1 * n2 / 12.0 * ((n + 1.0) - np.asarray(tie_sum, dtype=float) / (n * (n - 1.0)))
    d = u - mu
    num = np.sign(d) * np.maximum(np.abs(d) - CONTINUITY, 0.0)
    ok = var > 1e-12
    z = np.where(ok, num / np.sqrt(np.where(ok, var, 1.0)), 0.0)
    p = np.minimum(1.0, 2.0 * ndtr(-np.abs(z)))
    return z, p


def rank_sum_test(x, y) -> tuple[float, float]:
    """Two-sample tie-corrected rank-sum test; ``z > 0`` when ``x`` tends larger."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    pooled = np.concatenate([x, y])
    r = rankdata(pooled)
    u = r[: len(x)].sum() - len(x) * (len(x) + 1) / 2.0
    _, t = np.unique(pooled, return_counts=True)
    z, p = rank_sum_z(u, len(x), len(y), float((t.astype(float) ** 3 - t).sum()))
    return float(z), float(p)


def _tie_sums(sorted_col: np.ndarray) -> float:
    _, t = np.unique(sorted_col, return_counts=True)
    t = t.astype(float)
    return float((t**3 - t).sum())


def _gene_block(x: np.ndarray, labels: np.ndarray, n_clusters: int):
    ranks = rankdata(x, axis=0)
    rank_sums = np.zeros((n_clusters, x.shape[1]))
    np.add.at(rank_sums, labels, ranks)
    ties = np.array([_tie_sums(x[:, j]) for j in range(x.shape[1])])
    expm = np.expm1(x)
    sums = np.zeros((n_clusters, x.shape[1]))
    np.add.at(sums, labels, expm)
    total = expm.sum(axis=0)
    return rank_sums, ties, sums, total


def wilcoxon_one_vs_rest(normalized: np.ndarray, labels, gene_names: Sequence[str],
                         threads: int = 1, block: int = 256) -> DEGTable:
    """Test each cluster against all other cells, gene by gene.

    ``labels`` is a per-cell cluster index array (or a ``ClusterAssignment``).
    ``log_fold_change`` is log2 of the ratio of mean ``expm1`` values.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    x = np.asarray(normalized, dtype=np.float64)
    if x.shape[0] != len(labels):
        raise ValidationError(f"{x.shape[0]} matrix rows for {len(labels)} labels")
    if x.shape[1] != len(gene_names):
        raise ValidationError(f"{x.shape[1]} matrix columns for {len(gene_names)} genes")
    n_clusters = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=n_clusters)
    if np.any(sizes == 0):
        raise ValidationError(f"clusters without members: {np.flatnonzero(sizes == 0).tolist()}")
    n_cells, n_genes = x.shape

    starts = list(range(0, n_genes, block))
    chunks = [x[:, s:s + block] for s in starts]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _gene_block(c, labels, n_clusters), chunks))
    else:
        parts = [_gene_block(c, labels, n_clusters) for c in chunks]
    rank_sums = np.concatenate([p[0] for p in parts], axis=1)
    ties = np.concatenate([p[1] for p in parts])
    sums = np.concatenate([p[2] for p in parts], axis=1)
    total = np.concatenate([p[3] for p in parts])

    n1 = sizes[:, None].astype(float)
    n2 = n_cells - n1
    u = rank_sums - n1 * (n1 + 1.0) / 2.0
    z, p = rank_sum_z(u, n1, n2, ties[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_in = sums / n1
        mean_out = (total[None, :] - sums) / n2
        lfc = np.log2((mean_in + 1e-9) / (mean_out + 1e-9))

    empty = frozenset(int(k) for k in np.flatnonzero(n2[:, 0] == 0))
    if empty:
        logger.warning("clusters %s cover every cell; no rest group to test against", sorted(empty))
    names = np.asarray(gene_names)
    rank = np.zeros((n_clusters, n_genes), dtype=np.int64)
    for k in range(n_clusters):
        if k in empty:
            z[k] = p[k] = lfc[k] = np.nan
            continue
        order = np.lexsort((names, -z[k]))
        rank[k, order] = np.arange(1, n_genes + 1)
    return DEGTable(tuple(gene_names), z, p, lfc, rank, empty)


def top_n(table: DEGTable, cluster: int, n: int) -> list[str]:
    """Up to ``n`` genes with ``z > 0``, best rank first."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not 0 <= cluster < table.n_clusters:
        raise ValidationError(f"unknown cluster index {cluster}")
    if cluster in table.empty_clusters:
        return []
    out = []
    for i in np.argsort(table.rank[cluster], kind="stable"):
        if table.z[cluster, i] <= 0:
            break
        out.append(table.gene_names[i])
        if len(out) == n:
            break
    return out


def write_deg(table: DEGTable, path) -> Path:
    """TSV ``cluster, gene, z, p, rank`` ordered by (cluster, gene index)."""
    path = Path(path)
    lines = ["cluster\tgene\tz\tp\trank"]
    for k in range(table.n_clusters):
        if k in table.empty_clusters:
            continue
        for j, g in enumerate(table.gene_names):
            lines.append(f"{k}\t{g}\t{float(table.z[k, j])!r}\t{float(table.p[k, j])!r}\t{int(table.rank[k, j])}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_deg(path, n_clusters: int, gene_names: Sequence[str]) -> DEGTable:
    """Inverse of :func:`write_deg`; fold changes are not stored and come back NaN."""
    gpos = {g: j for j, g in enumerate(gene_names)}
    shape = (n_clusters, len(gene_names))
    z = np.full(shape, np.nan)
    p = np.full(shape, np.nan)
    rank = np.zeros(shape, dtype=np.int64)
    seen = set()
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if lineno == 1 or not ln.strip():
            continue
        k, g, zs, ps, rs = ln.split("\t")
        k, j = int(k), gpos[g]
        z[k, j], p[k, j], rank[k, j] = float(zs), float(ps), int(rs)
        seen.add(k)
    empty = frozenset(set(range(n_clusters)) - seen)
    return DEGTable(tuple(gene_names), z, p, np.full(shape, np.nan), rank, empty)
