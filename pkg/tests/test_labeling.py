import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpseudo.deg import DEGTable
from stpseudo.errors import ValidationError
from stpseudo.ingest import CancerGeneSet, MarkerDatabase
from stpseudo.labeling import (
    VOTING_CATEGORIES,
    CategoryScore,
    ClusterLabeling,
    classify_cluster,
    label_clusters,
    neoplastic_refine,
    propagate,
    read_labels,
    vote,
    write_labels,
)

CMAP = {"Epithelial cell": "Epithelial", "T cell": "Inflammatory", "Fibroblast": "Connective"}


def _db(rows):
    return MarkerDatabase.from_records([(g, t, o, "src") for g, t, o in rows], CMAP)


def _never():
    raise AssertionError("fallback should not be evaluated")


def test_worked_example_rank_n_gets_zero_weight():
    db = _db([("G1", "Epithelial cell", "*"), ("G2", "T cell", "*"), ("G3", "Epithelial cell", "*")])
    s = vote(["G1", "G2", "G3"], db, "breast", N=3)
    assert dict(s.scores) == {"Epithelial": 2.0, "Inflammatory": 1.0, "Connective": 0.0}


def test_empty_gene_list_scores_zero():
    assert vote([], _db([]), "breast").max == 0.0


def test_multiplicity_votes():
    db = _db([("G", "Epithelial cell", "*"), ("G", "Epithelial cell", "breast"), ("G", "Fibroblast", "*")])
    s = vote(["G"], db, "breast", N=10)
    assert (s["Epithelial"], s["Connective"]) == (18.0, 9.0)
    b = vote(["G"], db, "breast", N=10, binary=True)
    assert (b["Epithelial"], b["Connective"]) == (9.0, 9.0)


def test_organ_filter_and_unknown_category_ignored():
    db = MarkerDatabase.from_records(
        [("G", "Epithelial cell", "lung", "s"), ("G", "Mystery", "*", "s")], CMAP)
    assert vote(["G"], db, "breast", N=2).max == 0.0
    assert vote(["G"], db, None, N=2)["Epithelial"] == 1.0


def test_too_many_genes_rejected():
    with pytest.raises(ValidationError):
        vote(["A", "B"], _db([]), None, N=1)


def test_organ_pass_accepts():
    lab = classify_cluster(CategoryScore({"Epithelial": 6.0, "Inflammatory": 1.0}), _never, 5)
    assert (lab.category, lab.used_fallback) == ("Epithelial", False)


def test_fallback_pass():
    lab = classify_cluster(CategoryScore({"Epithelial": 3.0}), lambda: CategoryScore({"Connective": 7.0}), 5)
    assert (lab.category, lab.used_fallback) == ("Connective", True)


def test_double_failure_is_unknown():
    lab = classify_cluster(CategoryScore({"Epithelial": 3.0}), lambda: CategoryScore({"Connective": 4.0}), 5)
    assert lab.category == "Unknown" and lab.neoplastic_ratio is None


def test_tied_maximum_is_unknown():
    lab = classify_cluster(CategoryScore({"Epithelial": 6.0, "Connective": 6.0}), _never, 5)
    assert lab.category == "Unknown"


@settings(max_examples=100)
@given(st.dictionaries(st.sampled_from(VOTING_CATEGORIES), st.floats(0, 20)),
       st.dictionaries(st.sampled_from(VOTING_CATEGORIES), st.floats(0, 20)), st.floats(0, 10))
def test_classify_properties(organ, fallback, tau):
    lab = classify_cluster(CategoryScore(organ), lambda: CategoryScore(fallback), tau)
    chosen = lab.score
    if lab.category != "Unknown":
        assert chosen.max >= tau and chosen[lab.category] == chosen.max
        assert lab.used_fallback == (CategoryScore(organ).max < tau)
    elif CategoryScore(organ).max >= tau:
        assert CategoryScore(organ).argmax() is None


def _epi():
    return ClusterLabeling(0, "Epithelial", False, CategoryScore({"Epithelial": 9.0}), initial_category="Epithelial")


CANCER = CancerGeneSet(frozenset(f"C{i}" for i in range(10)))


def _genes(hits, total=20):
    return [f"C{i}" for i in range(hits)] + [f"X{i}" for i in range(total - hits)]


def test_ratio_above_threshold_relabels():
    lab = neoplastic_refine(_epi(), _genes(6), CANCER, 20, 0.25)
    assert lab.category == "Neoplastic" and lab.neoplastic_ratio == 0.3 and len(lab.cancer_hits) == 6


def test_ratio_at_threshold_stays():
    lab = neoplastic_refine(_epi(), _genes(5), CANCER, 20, 0.25)
    assert lab.category == "Epithelial" and lab.neoplastic_ratio == 0.25


def test_short_gene_list_uses_m_denominator():
    lab = neoplastic_refine(_epi(), _genes(5, total=5), CANCER, 20, 0.25)
    assert lab.neoplastic_ratio == 0.25 and lab.shortfall == 15 and lab.category == "Epithelial"


def test_non_epithelial_unchanged():
    inf = ClusterLabeling(1, "Inflammatory", False, CategoryScore({"Inflammatory": 9.0}))
    assert neoplastic_refine(inf, _genes(20), CANCER) is inf


def test_empty_cancer_set_rejected():
    with pytest.raises(ValidationError):
        neoplastic_refine(_epi(), [], CancerGeneSet(frozenset()))


def test_labeling_invariants():
    with pytest.raises(ValidationError):
        ClusterLabeling(0, "Unknown", True, CategoryScore({}), neoplastic_ratio=0.1)
    with pytest.raises(ValidationError):
        ClusterLabeling(0, "Neoplastic", False, CategoryScore({}), initial_category="Connective")


def _lab(k, cat):
    return ClusterLabeling(k, cat, False, CategoryScore({}))


def test_propagate():
    table = propagate([_lab(0, "Neoplastic"), _lab(1, "Connective")], [0, 1, 0, 1], ["b", "z", "a", "y"],
                      zero_count_cells={"z"})
    assert table.as_dict() == {"a": "Neoplastic", "b": "Neoplastic", "y": "Connective", "z": "Unknown"}
    assert table.cell_ids == ("a", "b", "y", "z")


def test_propagate_all_unknown():
    table = propagate([_lab(0, "Unknown")], [0, 0], ["a", "b"])
    assert set(table.labels) == {"Unknown"}


def test_propagate_missing_cluster_rejected():
    with pytest.raises(ValidationError):
        propagate([_lab(0, "Epithelial")], [0, 1], ["a", "b"])


def test_label_clusters_end_to_end():
    genes = ("E1", "E2", "ONC", "T1", "F1")
    db = _db([("E1", "Epithelial cell", "breast"), ("E2", "Epithelial cell", "*"),
              ("T1", "T cell", "*"), ("F1", "Fibroblast", "lung")])
    z = np.array([[5.0, 4.0, 3.0, -1.0, -1.0],   # epithelial with a cancer gene
                  [-1.0, -1.0, -1.0, 5.0, -2.0],  # inflammatory, single gene
                  [-1.0, -1.0, -1.0, -1.0, 5.0]])  # connective, only via the fallback
    rank = np.argsort(np.argsort(-z, axis=1, kind="stable"), axis=1) + 1
    table = DEGTable(genes, z, np.ones_like(z), np.zeros_like(z), rank)
    labs = label_clusters(table, db, "breast", CancerGeneSet(frozenset({"ONC"})), N=3, M=3,
                          tau_vote=1, tau_cancer=0.25)
    assert [lab.category for lab in labs] == ["Neoplastic", "Inflammatory", "Connective"]
    assert [lab.used_fallback for lab in labs] == [False, False, True]
    assert labs[0].neoplastic_ratio == pytest.approx(1 / 3)


def test_labels_round_trip(tmp_path):
    t = propagate([ClusterLabeling(0, "Epithelial", True, CategoryScore({}), neoplastic_ratio=0.2),
                   _lab(1, "Unknown")], [0, 1], ["a", "b"])
    back = read_labels(write_labels(t, tmp_path / "l.tsv"))
    assert back.as_dict() == t.as_dict()
    assert back.used_fallback == (True, False) and back.neoplastic_ratio == (0.2, None)


_GENES = [f"G{i}" for i in range(8)]
_ENTRY = st.tuples(st.sampled_from(_GENES), st.sampled_from(sorted(CMAP)), st.sampled_from(["*", "breast", "lung"]))


@settings(max_examples=80, deadline=None)
@given(st.lists(_ENTRY, max_size=20), st.integers(1, 6), st.integers(2, 10))
def test_scaling_votes_preserves_argmax(rows, copies, N):
    genes = _GENES[: min(N, len(_GENES))]
    once = vote(genes, _db(rows), "breast", N)
    scaled = vote(genes, _db(rows * copies), "breast", N)
    for c in VOTING_CATEGORIES:
        assert scaled[c] == copies * once[c]
    assert scaled.argmax() == once.argmax()
    a = classify_cluster(once, lambda: vote(genes, _db(rows), None, N), 5.0)
    b = classify_cluster(scaled, lambda: vote(genes, _db(rows * copies), None, N), 5.0 * copies)
    assert (a.category, a.used_fallback) == (b.category, b.used_fallback)


@settings(max_examples=80, deadline=None)
@given(st.lists(_ENTRY, max_size=15), _ENTRY, st.integers(2, 10))
def test_adding_an_entry_is_monotone(rows, extra, N):
    genes = _GENES[: min(N, len(_GENES))]
    before = vote(genes, _db(rows), "breast", N)
    after = vote(genes, _db(rows + [extra]), "breast", N)
    cat = CMAP[extra[1]]
    assert after[cat] >= before[cat]
    for c in VOTING_CATEGORIES:
        if c != cat:
            assert after[c] == before[c]


@settings(max_examples=80)
@given(st.sampled_from(["Epithelial", "Inflammatory", "Connective", "Unknown"]), st.integers(0, 20))
def test_only_epithelial_can_become_neoplastic(category, hits):
    lab = ClusterLabeling(0, category, False, CategoryScore({}))
    out = neoplastic_refine(lab, _genes(hits), CancerGeneSet(frozenset(f"C{i}" for i in range(20))), 20, 0.25)
    if out.category == "Neoplastic":
        assert category == "Epithelial"
    else:
        assert out.category == category
