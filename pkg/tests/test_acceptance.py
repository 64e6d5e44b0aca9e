"""Acceptance gate. Each test prints exactly one PASS/FAIL line.

Tolerances and fixture designs are fixed here and must not be loosened.
"""

import time
from pathlib import Path

import numpy as np

from oracles import best_partition, brute_macro_f1, brute_metrics, dense_adjacency, exact_rank_sum_p
from stpseudo import cli
from stpseudo.cluster import leiden
from stpseudo.deg import rank_sum_test
from stpseudo.ingest import CancerGeneSet, CellRecord, MarkerDatabase, SlideManifest
from stpseudo.labeling import (
    DEFAULT_TAU_CANCER,
    DEFAULT_TAU_VOTE,
    CategoryScore,
    ClusterLabeling,
    classify_cluster,
    neoplastic_refine,
    vote,
)
from stpseudo.metrics import classification_scores, dice_jaccard, match_and_detect
from stpseudo.metrics import bpq as bpq_fn
from stpseudo.config import load_config
from stpseudo.pipeline import Pipeline
from stpseudo.preprocess import NeighborGraph
from stpseudo.synthetic import ellipse, make_planted_fixture
from stpseudo.tiling import TYPE_CLASSES, PatchSpec, index_set, make_patches, rasterize, write_dataset

P_TOLERANCE = 0.05
WILCOXON_BUDGET_S = 10.0
LEIDEN_BUDGET_S = 30.0
LEIDEN_MIN_RATIO = 0.99
PLANTED_MIN_ACCURACY = 0.99
PLANTED_BUDGET_S = 60.0
METRIC_TOL = 1e-12


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# 1 -------------------------------------------------------------------------

def test_criterion_1_wilcoxon_oracle(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    n_fixtures = 60
    for _ in range(n_fixtures):
        n1, n2 = rng.integers(3, 6, size=2)
        x, y = rng.normal(size=n1), rng.normal(loc=rng.uniform(-2, 2), size=n2)
        _, p = rank_sum_test(x, y)
        worst = max(worst, abs(p - exact_rank_sum_p(x, y)))
    exact_anchor = exact_rank_sum_p([1, 2, 3], [4, 5, 6])
    z_anchor, p_anchor = rank_sum_test([1, 2, 3], [4, 5, 6])
    worst = max(worst, abs(p_anchor - exact_anchor))
    elapsed = time.perf_counter() - t0
    ok = worst <= P_TOLERANCE and exact_anchor == 0.1 and z_anchor < 0 and elapsed < WILCOXON_BUDGET_S
    report_line("criterion 1 (Wilcoxon oracle)", ok,
                f"{n_fixtures + 1} fixtures, max |p - exact| = {worst:.4f} (tol {P_TOLERANCE}), "
                f"anchor exact p = {exact_anchor}, approx p = {p_anchor:.4f}, {elapsed:.2f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def _random_graph(rng):
    n = int(rng.integers(3, 9))
    density = rng.uniform(0.2, 0.7)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < density]
    if not edges:
        edges = [(0, 1)]
    return n, edges


def test_criterion_2_leiden_oracle(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n_graphs = 30
    exact = 0
    exceptions = []
    for gi in range(n_graphs):
        n, edges = _random_graph(rng)
        gamma = float(rng.choice([0.5, 1.0, 2.0]))
        opt, _ = best_partition(dense_adjacency(n, edges), gamma)
        got = leiden(NeighborGraph.from_edges(n, edges), resolution=gamma, seed=0).quality
        if got >= opt - 1e-9:
            exact += 1
        else:
            ratio = got / opt if opt > 0 else float("-inf")
            exceptions.append((gi, n, len(edges), gamma, got, opt, ratio))
    cliques_ok = True
    for seed in range(20):
        a = int(rng.integers(3, 7))
        b = int(rng.integers(3, 7))
        edges = [(i, j) for i in range(a) for j in range(i + 1, a)]
        edges += [(a + i, a + j) for i in range(b) for j in range(i + 1, b)]
        res = leiden(NeighborGraph.from_edges(a + b, edges), resolution=1.0, seed=seed)
        cliques_ok &= res.n_clusters == 2 and len(set(res.labels[:a])) == 1 and len(set(res.labels[a:])) == 1
    elapsed = time.perf_counter() - t0
    ratios_ok = all(e[6] >= LEIDEN_MIN_RATIO for e in exceptions)
    ok = ratios_ok and cliques_ok and elapsed < LEIDEN_BUDGET_S
    detail = (f"{exact}/{n_graphs} graphs at the exhaustive optimum, two-clique K=2 in 20/20: {cliques_ok}, "
              f"{elapsed:.2f}s")
    for gi, n, m, gamma, got, opt, ratio in exceptions:
        detail += f"; exception graph {gi} (n={n}, m={m}, gamma={gamma}): {got:.6f} vs {opt:.6f} ({ratio:.1%})"
    report_line("criterion 2 (Leiden oracle)", ok, detail)
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_3_voting_rules(report_line):
    db = MarkerDatabase.from_records(
        [("G1", "Epithelial cell", "*", "t"), ("G2", "T cell", "*", "t"), ("G3", "Epithelial cell", "*", "t")],
        {"Epithelial cell": "Epithelial", "T cell": "Inflammatory"},
    )
    s = vote(["G1", "G2", "G3"], db, "breast", N=3)
    example_ok = dict(s.scores) == {"Epithelial": 2.0, "Inflammatory": 1.0, "Connective": 0.0}

    def never():
        raise AssertionError("fallback must not run")

    def fallback(score):
        return lambda: CategoryScore(score)

    at_tau = classify_cluster(CategoryScore({"Epithelial": 5.0, "Inflammatory": 1.0}), never)
    below = classify_cluster(CategoryScore({"Epithelial": 4.999, "Inflammatory": 1.0}),
                             fallback({"Connective": 7.0}))
    vote_ok = (DEFAULT_TAU_VOTE == 5 and at_tau.category == "Epithelial" and not at_tau.used_fallback
               and below.category == "Connective" and below.used_fallback)

    cancer = CancerGeneSet(frozenset(f"C{i}" for i in range(6)))
    epi = ClusterLabeling(0, "Epithelial", False, CategoryScore({"Epithelial": 9.0}))
    five = [f"C{i}" for i in range(5)] + [f"X{i}" for i in range(15)]
    six = [f"C{i}" for i in range(6)] + [f"X{i}" for i in range(14)]
    r25 = neoplastic_refine(epi, five, cancer, M=20, tau_cancer=DEFAULT_TAU_CANCER)
    r30 = neoplastic_refine(epi, six, cancer, M=20, tau_cancer=DEFAULT_TAU_CANCER)
    cancer_ok = (DEFAULT_TAU_CANCER == 0.25 and r25.category == "Epithelial" and r25.neoplastic_ratio == 0.25
                 and r30.category == "Neoplastic" and r30.neoplastic_ratio == 0.3)
    ok = example_ok and vote_ok and cancer_ok
    report_line("criterion 3 (voting rules)", ok,
                f"worked example {dict(s.scores)}; max 5 accepted / 4.999 falls back: {vote_ok}; "
                f"ratio 0.25 -> {r25.category}, 0.30 -> {r30.category}")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_4_planted_end_to_end(tmp_path, report_line):
    t0 = time.perf_counter()
    fx = make_planted_fixture(tmp_path / "fx", seed=0)
    pipe = Pipeline(load_config(fx.config_path), tmp_path / "out")
    pipe.run()
    got = {}
    for line in (tmp_path / "out" / "label" / "labels.tsv").read_text().splitlines()[1:]:
        cid, _, label = line.split("\t")[:3]
        got[cid] = label
    correct = sum(got.get(c) == t for c, t in fx.truth.items())
    acc = correct / len(fx.truth)
    n_neo = sum(1 for c, t in fx.truth.items() if t == "Neoplastic" and got.get(c) == "Neoplastic")
    elapsed = time.perf_counter() - t0
    ok = acc >= PLANTED_MIN_ACCURACY and elapsed < PLANTED_BUDGET_S and (tmp_path / "out/dataset/manifest.json").exists()
    report_line("criterion 4 (planted end-to-end)", ok,
                f"accuracy {acc:.4f} over {len(fx.truth)} cells (min {PLANTED_MIN_ACCURACY}), "
                f"{n_neo} Neoplastic recovered, {elapsed:.2f}s")
    assert ok


# 5 -------------------------------------------------------------------------

def _random_patch_case(rng, index):
    size_w, size_h = int(rng.integers(12, 65)), int(rng.integers(12, 65))
    x0, y0 = int(rng.integers(0, 200)), int(rng.integers(0, 200))
    patch = PatchSpec(index, x0, y0, size_w, size_h, "breast")
    cells = []
    for k in range(int(rng.integers(0, 9))):
        cx = x0 + rng.uniform(-6, size_w + 6)
        cy = y0 + rng.uniform(-6, size_h + 6)
        poly = ellipse(cx, cy, rng.uniform(0.6, 8), rng.uniform(0.6, 8), int(rng.integers(3, 14)),
                       rng.uniform(0, np.pi))
        try:
            cells.append(CellRecord.from_polygon(f"c{index}_{k}", poly))
        except ValueError:
            continue
    labels = ["Neoplastic", "Epithelial", "Inflammatory", "Connective", "Unknown"]
    members = [(cells[j], labels[int(rng.integers(0, 5))]) for j in index_set(patch, cells)]
    return patch, cells, members


def test_criterion_5_target_map_invariants(tmp_path, report_line):
    rng = np.random.default_rng(0)
    failures = []
    n_nuclei = 0
    for i in range(100):
        patch, _, members = _random_patch_case(rng, i)
        maps = rasterize(patch, members)
        fg = maps.instance_map > 0
        n_nuclei += len(maps.instances)
        checks = {
            "D in [-1,1]": bool(np.all(np.abs(maps.hv) <= 1.0)),
            "D = 0 off foreground": bool(np.all(maps.hv[~fg] == 0)),
            "S rows sum to 1": bool(np.all(maps.type_onehot.sum(axis=2) == 1)),
            "ignore within foreground": bool(np.all(fg[maps.ignore.astype(bool)])),
            "binary = instance > 0": bool(np.array_equal(maps.binary.astype(bool), fg)),
        }
        failures += [f"patch {i}: {k}" for k, v in checks.items() if not v]

    coverage_ok = True
    for _ in range(20):
        w, h = int(rng.integers(1, 700)), int(rng.integers(1, 700))
        size = int(rng.integers(16, 300))
        cover = np.zeros((h, w), dtype=np.int32)
        for p in make_patches(SlideManifest("breast", w, h, 0.25), size, size):
            cover[p.y0:p.y0 + p.height, p.x0:p.x0 + p.width] += 1
        coverage_ok &= bool(np.all(cover == 1))

    slide = SlideManifest("breast", 150, 110, 0.25)
    cells = []
    for k in range(25):
        cells.append(CellRecord.from_polygon(f"n{k:02d}", ellipse(rng.uniform(0, 150), rng.uniform(0, 110),
                                                                   rng.uniform(2, 7), rng.uniform(2, 7), 10)))
    labels = {c.cell_id: ["Neoplastic", "Epithelial", "Inflammatory", "Connective", "Unknown"][k % 5]
              for k, c in enumerate(cells)}
    patches = make_patches(slide, 64, 64)
    write_dataset(tmp_path / "a", patches, cells, labels, slide, 64, 64)
    write_dataset(tmp_path / "b", patches, cells, labels, slide, 64, 64, threads=4)
    identical = _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    ok = not failures and coverage_ok and identical
    report_line("criterion 5 (target-map invariants)", ok,
                f"100 patches / {n_nuclei} nuclei, {len(failures)} invariant violations; "
                f"exact tiling coverage on 20 slides: {coverage_ok}; byte-identical re-run: {identical}"
                + (f"; first: {failures[0]}" if failures else ""))
    assert ok


# 6 -------------------------------------------------------------------------

def _random_instance_map(rng, n_max=6, size=32):
    m = np.zeros((size, size), dtype=np.int64)
    n = int(rng.integers(1, n_max + 1))
    for i in range(1, n + 1):
        h, w = rng.integers(3, 12, size=2)
        y, x = rng.integers(0, size - 2, size=2)
        m[y:y + h, x:x + w] = i
    return m


def _perturb(rng, gt, n_max=6):
    pred = np.zeros_like(gt)
    ids = [i for i in np.unique(gt) if i > 0]
    next_id = 1
    for i in ids:
        r = rng.random()
        if r < 0.2:
            continue  # missed
        mask = gt == i
        if r < 0.7:
            mask = np.roll(mask, tuple(rng.integers(-2, 3, size=2)), axis=(0, 1))
        pred[mask] = next_id
        next_id += 1
    if next_id <= n_max and rng.random() < 0.5:
        y, x = rng.integers(0, 28, size=2)
        pred[y:y + 4, x:x + 4] = next_id
    return pred


def test_criterion_6_metrics_oracle(report_line):
    rng = np.random.default_rng(0)
    classes = ("Neoplastic", "Epithelial", "Inflammatory", "Connective")
    worst = 0.0
    identity_worst = 0.0
    for _ in range(50):
        gt = _random_instance_map(rng)
        pred = _perturb(rng, gt)
        ref = brute_metrics(gt, pred)
        dice, jac = dice_jaccard(gt > 0, pred > 0)
        match, f1, _, _ = match_and_detect(gt, pred)
        b = bpq_fn(gt, pred)
        gl = {int(i): classes[int(rng.integers(0, 4))] for i in np.unique(gt) if i > 0}
        pl = {int(i): classes[int(rng.integers(0, 4))] for i in np.unique(pred) if i > 0}
        macro, _, _ = classification_scores(match, gl, pl, classes)
        ref_macro, _ = brute_macro_f1(ref["pairs"], ref["unmatched_gt"], ref["unmatched_pred"], gl, pl, classes)
        worst = max(worst, abs(dice - ref["dice"]), abs(jac - ref["jaccard"]), abs(f1 - ref["f1"]),
                    abs(b - ref["bpq"]), abs(macro - ref_macro))
        mean_iou = match.iou_sum / match.tp if match.tp else 0.0
        identity_worst = max(identity_worst, abs(b - f1 * mean_iou))
    ok = worst <= METRIC_TOL and identity_worst <= METRIC_TOL
    report_line("criterion 6 (metrics oracle)", ok,
                f"50 maps, max deviation from brute force {worst:.2e}, "
                f"max |bpq - f1*meanIoU| {identity_worst:.2e} (tol {METRIC_TOL})")
    assert ok


# 7 -------------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path, report_line):
    fx = make_planted_fixture(tmp_path / "fx", seed=0)
    runs = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        code = cli.main(["--config", str(fx.config_path), "--out", str(tmp_path / name),
                         "--threads", str(threads), "run"])
        assert code == 0
        runs[name] = _tree_bytes(tmp_path / name)
    same_runs = runs["a"] == runs["b"]
    same_threads = runs["a"] == runs["c"]
    ok = same_runs and same_threads and len(runs["a"]) > 0
    report_line("criterion 7 (determinism)", ok,
                f"{len(runs['a'])} files; two runs identical: {same_runs}; --threads 1 vs 8 identical: {same_threads}")
    assert ok
