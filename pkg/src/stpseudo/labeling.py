"""Cluster-level cell-type calls from ranked DEGs and marker databases.

A cluster's top-``N`` upregulated genes vote for coarse categories with
weight ``N - l`` at rank ``l``. Organ-matched entries are tried first and the
organ-agnostic database is the fallback; clusters whose best score stays
below ``tau_vote`` (or whose best categories tie) become Unknown. Epithelial
clusters whose top-``M`` genes overlap the cancer gene set by more than
``tau_cancer * M`` genes become Neoplastic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .deg import DEGTable, top_n
from .errors import ValidationError
from .ingest import CancerGeneSet, MarkerDatabase

VOTING_CATEGORIES = ("Epithelial", "Inflammatory", "Connective")
LABELS = ("Neoplastic", "Epithelial", "Inflammatory", "Connective", "Unknown")

DEFAULT_N = 10
DEFAULT_M = 20
DEFAULT_TAU_VOTE = 5.0
DEFAULT_TAU_CANCER = 0.25


@dataclass(frozen=True)
class CategoryScore:
    scores: Mapping[str, float]
    cluster: int | None = None

    def __getitem__(self, category: str) -> float:
        return self.scores.get(category, 0.0)

    @property
    def max(self) -> float:
        return max(self.scores.values(), default=0.0)

    def argmax(self) -> str | None:
        """Best category, or None when the maximum is shared."""
        top = self.max
        best = [c for c in VOTING_CATEGORIES if self[c] == top]
        return best[0] if len(best) == 1 else None

    @classmethod
    def zeros(cls, cluster: int | None = None) -> "CategoryScore":
        return cls({c: 0.0 for c in VOTING_CATEGORIES}, cluster)


@dataclass(frozen=True)
class ClusterLabeling:
    cluster: int
    category: str
    used_fallback: bool
    score: CategoryScore
    neoplastic_ratio: float | None = None
    initial_category: str | None = None
    cancer_hits: tuple[str, ...] = ()
    # requested M minus the number of positive-z genes available
    shortfall: int = 0

    def __post_init__(self):
        if self.category not in LABELS:
            raise ValidationError(f"invalid category {self.category!r}")
        if self.category == "Unknown" and self.neoplastic_ratio is not None:
            raise ValidationError("Unknown clusters carry no neoplastic ratio")
        if self.category == "Neoplastic" and self.initial_category not in (None, "Epithelial"):
            raise ValidationError("Neoplastic is only reachable from Epithelial")


def vote(genes: Sequence[str], db: MarkerDatabase, organ: str | None, N: int = DEFAULT_N,
         binary: bool = False, cluster: int | None = None) -> CategoryScore:
    """Weighted category votes ``s_c = sum_l (N - l) v_c(g_l)``.

    ``organ=None`` uses every entry; otherwise only entries for that organ or
    the wildcard. ``v_c(g)`` counts matching entries of category ``c``
    (``binary=True`` caps it at 1).
    """
    if len(genes) > N:
        raise ValidationError(f"{len(genes)} genes supplied for N={N}")
    scores = dict.fromkeys(VOTING_CATEGORIES, 0.0)
    for rank, gene in enumerate(genes, start=1):
        weight = N - rank
        counts: dict[str, int] = {}
        for e in db.lookup(gene, organ):
            if e.category in scores:
                counts[e.category] = counts.get(e.category, 0) + 1
        for cat, n in counts.items():
            scores[cat] += weight * (min(n, 1) if binary else n)
    return CategoryScore(scores, cluster)


def classify_cluster(score_organ: CategoryScore, make_fallback: Callable[[], CategoryScore],
                     tau_vote: float = DEFAULT_TAU_VOTE, cluster: int | None = None) -> ClusterLabeling:
    """Organ pass, then organ-agnostic fallback, then Unknown."""
    if tau_vote < 0:
        raise ValidationError("tau_vote must be >= 0")
    cid = cluster if cluster is not None else (score_organ.cluster if score_organ.cluster is not None else -1)
    if score_organ.max >= tau_vote:
        cat = score_organ.argmax() or "Unknown"
        return ClusterLabeling(cid, cat, False, score_organ, initial_category=cat)
    fallback = make_fallback()
    if fallback.max >= tau_vote:
        cat = fallback.argmax() or "Unknown"
        return ClusterLabeling(cid, cat, True, fallback, initial_category=cat)
    return ClusterLabeling(cid, "Unknown", True, fallback, initial_category="Unknown")


def neoplastic_refine(labeling: ClusterLabeling, top_m_genes: Sequence[str], cancer_set: CancerGeneSet,
                      M: int = DEFAULT_M, tau_cancer: float = DEFAULT_TAU_CANCER) -> ClusterLabeling:
    """Relabel an Epithelial cluster as Neoplastic when ``hits / M > tau_cancer``."""
    if len(cancer_set) == 0:
        raise ValidationError("neoplastic refinement needs a non-empty cancer gene set")
    if labeling.category != "Epithelial":
        return labeling
    if len(top_m_genes) > M:
        raise ValidationError(f"{len(top_m_genes)} genes supplied for M={M}")
    hits = tuple(g for g in top_m_genes if g in cancer_set)
    ratio = len(hits) / M
    cat = "Neoplastic" if ratio > tau_cancer else "Epithelial"
    return replace(labeling, category=cat, neoplastic_ratio=ratio, cancer_hits=hits,
                   shortfall=M - len(top_m_genes))


def label_clusters(table: DEGTable, db: MarkerDatabase, organ: str | None,
                   cancer_set: CancerGeneSet | None, N: int = DEFAULT_N, M: int = DEFAULT_M,
                   tau_vote: float = DEFAULT_TAU_VOTE, tau_cancer: float = DEFAULT_TAU_CANCER,
                   binary_votes: bool = False) -> list[ClusterLabeling]:
    """Run voting, fallback and (when ``cancer_set`` is given) refinement per cluster."""
    out = []
    for k in range(table.n_clusters):
        genes = top_n(table, k, N) if k not in table.empty_clusters else []
        score = vote(genes, db, organ, N, binary_votes, k)
        lab = classify_cluster(score, lambda g=genes, c=k: vote(g, db, None, N, binary_votes, c), tau_vote, k)
        if cancer_set is not None:
            top_m = top_n(table, k, M) if k not in table.empty_clusters else []
            lab = neoplastic_refine(lab, top_m, cancer_set, M, tau_cancer)
        out.append(lab)
    return out


@dataclass(frozen=True, eq=False)
class CellLabelTable:
    cell_ids: tuple[str, ...]
    clusters: np.ndarray
    labels: tuple[str, ...]
    used_fallback: tuple[bool, ...] = ()
    neoplastic_ratio: tuple[float | None, ...] = ()

    def as_dict(self) -> dict[str, str]:
        return dict(zip(self.cell_ids, self.labels))


def propagate(labelings: Sequence[ClusterLabeling], clusters, cell_ids: Sequence[str],
              zero_count_cells: Iterable[str] = ()) -> CellLabelTable:
    """Copy each cluster's final category to its cells; zero-count cells become Unknown."""
    clusters = np.asarray(getattr(clusters, "labels", clusters), dtype=np.int64)
    if len(clusters) != len(cell_ids):
        raise ValidationError(f"{len(clusters)} cluster labels for {len(cell_ids)} cells")
    by_cluster = {lab.cluster: lab for lab in labelings}
    missing = set(np.unique(clusters).tolist()) - by_cluster.keys()
    if missing:
        raise ValidationError(f"clusters without a labeling: {sorted(missing)}")
    zero = set(zero_count_cells)
    order = np.argsort(np.asarray(cell_ids), kind="stable")
    ids, ks, labels, fb, ratio = [], [], [], [], []
    for i in order:
        lab = by_cluster[int(clusters[i])]
        cid = cell_ids[i]
        ids.append(cid)
        ks.append(int(clusters[i]))
        if cid in zero:
            labels.append("Unknown")
            ratio.append(None)
        else:
            labels.append(lab.category)
            ratio.append(lab.neoplastic_ratio)
        fb.append(lab.used_fallback)
    return CellLabelTable(tuple(ids), np.asarray(ks, dtype=np.int64), tuple(labels), tuple(fb), tuple(ratio))


def _fmt_ratio(r: float | None) -> str:
    return "" if r is None else repr(float(r))


def write_labels(table: CellLabelTable, path) -> Path:
    path = Path(path)
    lines = ["cell_id\tcluster\tlabel\tused_fallback\tneoplastic_ratio"]
    for cid, k, lab, fb, r in zip(table.cell_ids, table.clusters, table.labels,
                                  table.used_fallback, table.neoplastic_ratio):
        lines.append(f"{cid}\t{int(k)}\t{lab}\t{str(bool(fb)).lower()}\t{_fmt_ratio(r)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_labels(path) -> CellLabelTable:
    ids, ks, labs, fbs, ratios = [], [], [], [], []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if lineno == 1 or not ln.strip():
            continue
        cid, k, lab, fb, r = ln.split("\t")
        if lab not in LABELS:
            raise ValidationError(f"{path}:{lineno}: unknown label {lab!r}")
        ids.append(cid)
        ks.append(int(k))
        labs.append(lab)
        fbs.append(fb == "true")
        ratios.append(float(r) if r else None)
    return CellLabelTable(tuple(ids), np.asarray(ks, dtype=np.int64), tuple(labs), tuple(fbs), tuple(ratios))


def write_cluster_report(labelings: Sequence[ClusterLabeling], path) -> Path:
    """Per-cluster decision TSV (scores, fallback flag, ratio, cancer hits)."""
    path = Path(path)
    cols = ["cluster", "category", "initial_category", "used_fallback", *VOTING_CATEGORIES,
            "neoplastic_ratio", "cancer_hits"]
    lines = ["\t".join(cols)]
    for lab in labelings:
        lines.append("\t".join([
            str(lab.cluster), lab.category, lab.initial_category or "", str(lab.used_fallback).lower(),
            *(repr(float(lab.score[c])) for c in VOTING_CATEGORIES),
            _fmt_ratio(lab.neoplastic_ratio), ",".join(lab.cancer_hits),
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path
