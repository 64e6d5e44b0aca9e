"""Planted-population fixtures: small but complete input sets with known labels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import ExpressionMatrix, CellRecord, write_boundaries, write_expression

POPULATIONS = {
    "Epithelial": 80,
    "Neoplastic": 70,
    "Inflammatory": 75,
    "Connective": 75,
}


@dataclass
class PlantedFixture:
    directory: Path
    config_path: Path
    truth: dict[str, str]
    marker_genes: dict[str, list[str]]
    cancer_genes: list[str]


def ellipse(cx: float, cy: float, rx: float, ry: float, n: int = 12, angle: float = 0.0) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = rx * np.cos(t), ry * np.sin(t)
    ca, sa = np.cos(angle), np.sin(angle)
    return np.stack([cx + ca * x - sa * y, cy + sa * x + ca * y], axis=1)


def planted_counts(rng: np.random.Generator, n_genes: int = 60, sizes: dict[str, int] | None = None):
    """Poisson counts for planted populations.

    Returns ``(counts, truth_labels, gene_names, markers, cancer_genes)``.
    Each voting category gets 8 private markers; the Neoplastic population
    expresses the Epithelial markers plus 6 cancer genes.
    """
    sizes = sizes or POPULATIONS
    markers = {cat: [f"{cat[:3].upper()}{i}" for i in range(1, 9)]
               for cat in ("Epithelial", "Inflammatory", "Connective")}
    cancer = [f"ONC{i}" for i in range(1, 7)]
    n_bg = n_genes - 24 - len(cancer)
    if n_bg < 0:
        raise ValueError("need at least 30 genes")
    genes = markers["Epithelial"] + markers["Inflammatory"] + markers["Connective"] + cancer
    genes += [f"BG{i}" for i in range(1, n_bg + 1)]
    col = {g: j for j, g in enumerate(genes)}

    truth = []
    for pop, n in sizes.items():
        truth += [pop] * n
    truth = np.asarray(truth)
    lam = np.full((len(truth), len(genes)), 0.05)
    lam[:, 24 + len(cancer):] = 2.0
    for i, pop in enumerate(truth):
        own = "Epithelial" if pop == "Neoplastic" else pop
        for g in markers[own]:
            lam[i, col[g]] = 8.0
        if pop == "Neoplastic":
            for g in cancer:
                lam[i, col[g]] = 6.0
    counts = rng.poisson(lam)
    return counts, truth, genes, markers, cancer


def make_planted_fixture(directory, seed: int = 0, width: int = 512, height: int = 512,
                         tissue: str = "breast") -> PlantedFixture:
    """Write a 300-cell, 60-gene input set plus ``config.ini`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    counts, truth, genes, markers, cancer = planted_counts(rng)
    n = len(truth)
    perm = rng.permutation(n)
    counts, truth = counts[perm], truth[perm]
    cell_ids = [f"cell{i:04d}" for i in range(n)]
    write_expression(ExpressionMatrix.from_dense(counts, cell_ids, genes), directory / "expr")

    # nuclei on a jittered grid
    side = int(np.ceil(np.sqrt(n)))
    step_x, step_y = width / side, height / side
    cells = []
    for i, cid in enumerate(cell_ids):
        r, c = divmod(i, side)
        cx = (c + 0.5) * step_x + rng.uniform(-3, 3)
        cy = (r + 0.5) * step_y + rng.uniform(-3, 3)
        poly = ellipse(cx, cy, rng.uniform(4, 9), rng.uniform(4, 9), int(rng.integers(8, 16)),
                       rng.uniform(0, np.pi))
        cells.append(CellRecord.from_polygon(cid, poly))
    write_boundaries(cells, directory / "boundaries.geojson")

    rows = ["gene\tcell_type\torgan\tsource"]
    for g in markers["Epithelial"]:
        rows.append(f"{g}\tEpithelial cell\t{tissue}\tPanglaoDB")
        rows.append(f"{g}\tLuminal epithelial cell\t*\tPanglaoDB")
    for g in markers["Inflammatory"]:
        rows.append(f"{g}\tT cell\t*\tPanglaoDB")
    for g in markers["Inflammatory"][:4]:
        rows.append(f"{g}\tHepatocyte\tliver\tPanglaoDB")
    (directory / "panglao.tsv").write_text("\n".join(rows) + "\n")
    rows = ["gene\tcell_type\torgan\tsource"]
    # connective markers only annotated for another organ: resolved by the fallback pass
    for g in markers["Connective"]:
        rows.append(f"{g}\tFibroblast\tlung\tCellMarker")
    rows.append("BG1\tMystery cell\t*\tCellMarker")
    (directory / "cellmarker.tsv").write_text("\n".join(rows) + "\n")
    (directory / "categories.tsv").write_text(
        "cell_type\tcategory\n"
        "Epithelial cell\tEpithelial\n"
        "Luminal epithelial cell\tEpithelial\n"
        "Hepatocyte\tEpithelial\n"
        "T cell\tInflammatory\n"
        "Fibroblast\tConnective\n"
    )
    (directory / "cancer.tsv").write_text(
        "gene\tsource\n" + "".join(f"{g}\tCancerSEA\n" for g in cancer) + "NOTEXPRESSED1\tCellMarker\n"
    )
    (directory / "slide.txt").write_text(f"tissue={tissue}\nwidth={width}\nheight={height}\nmpp=0.2125\n")
    config = directory / "config.ini"
    config.write_text(
        "[paths]\n"
        "expression = expr/matrix.mtx\n"
        "boundaries = boundaries.geojson\n"
        "markers = panglao.tsv, cellmarker.tsv\n"
        "category_map = categories.tsv\n"
        "cancer_genes = cancer.tsv\n"
        "manifest = slide.txt\n"
        "\n[run]\nseed = 0\n"
        "\n[preprocess]\ntarget_sum = 10000\nn_components = 50\nk = 15\n"
        "\n[cluster]\nresolution = 4.0\nmax_iterations = 100\n"
        "\n[labeling]\nN = 10\nM = 20\ntau_vote = 5\ntau_cancer = 0.25\n"
        "\n[tiling]\npatch_size = 256\nstride = 256\n"
    )
    return PlantedFixture(directory, config, dict(zip(cell_ids, truth.tolist())), markers, cancer)
