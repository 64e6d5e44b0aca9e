"""Readers and validated containers for the raw inputs.

Expression counts come in as MatrixMarket coordinate files with ``cells.txt``
and ``genes.txt`` sidecars, nuclear boundaries as a GeoJSON FeatureCollection,
marker databases / category maps / cancer gene sets as headed TSVs and the
slide manifest as ``key=value`` text.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError
from .geometry import as_vertices, clip_polygon_to_rect, polygon_area, rasterize_polygon

logger = logging.getLogger(__name__)

CATEGORIES = ("Epithelial", "Inflammatory", "Connective", "Unknown")
WILDCARD = "*"
MM_HEADER = "%%matrixmarket matrix coordinate integer general"


def canonical_gene(symbol: str) -> str:
    return symbol.strip().upper()


def canonical_organ(organ: str) -> str:
    return organ.strip().lower()


# --------------------------------------------------------------------------
# expression


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    """Sparse cell x gene integer counts.

    ``counts`` is a CSR matrix with rows = ``cell_ids`` and columns =
    ``gene_names`` (canonical upper case).
    """

    counts: sp.csr_matrix
    cell_ids: tuple[str, ...]
    gene_names: tuple[str, ...]

    def __post_init__(self):
        if self.counts.shape != (len(self.cell_ids), len(self.gene_names)):
            raise ValidationError(
                f"counts shape {self.counts.shape} does not match "
                f"{len(self.cell_ids)} cells x {len(self.gene_names)} genes"
            )
        for name, ids in (("cell id", self.cell_ids), ("gene", self.gene_names)):
            dup = [k for k, n in Counter(ids).items() if n > 1]
            if dup:
                raise ValidationError(f"duplicate {name}(s): {', '.join(sorted(dup)[:10])}")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise ValidationError("negative count in expression matrix")

    @classmethod
    def from_dense(cls, dense, cell_ids: Sequence[str], gene_names: Sequence[str]):
        arr = np.asarray(dense)
        if not np.all(arr == np.round(arr)):
            raise ValidationError("counts must be integer-valued")
        m = sp.csr_matrix(arr.astype(np.int64))
        m.eliminate_zeros()
        return cls(m, tuple(cell_ids), tuple(canonical_gene(g) for g in gene_names))

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    @property
    def nnz(self) -> int:
        return int(self.counts.nnz)

    def triplets(self) -> list[tuple[int, int, int]]:
        """Stored ``(cell_index, gene_index, count)`` entries in row-major order."""
        coo = self.counts.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [
            (int(r), int(c), int(v))
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order])
        ]

    def totals(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).ravel()

    def zero_count_cells(self) -> frozenset[str]:
        tot = self.totals()
        return frozenset(cid for cid, t in zip(self.cell_ids, tot) if t == 0)

    def select_cells(self, cell_ids: Sequence[str]) -> "ExpressionMatrix":
        pos = {cid: i for i, cid in enumerate(self.cell_ids)}
        rows = [pos[c] for c in cell_ids]
        sub = self.counts[rows].tocsr()
        sub.sort_indices()
        return ExpressionMatrix(sub, tuple(cell_ids), self.gene_names)

    def equals(self, other: "ExpressionMatrix") -> bool:
        return (
            self.cell_ids == other.cell_ids
            and self.gene_names == other.gene_names
            and self.triplets() == other.triplets()
        )


def _read_id_list(path: Path) -> list[str]:
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise ParseError("missing sidecar id list", path) from None
    ids = [ln.strip() for ln in lines]
    while ids and ids[-1] == "":
        ids.pop()
    for i, s in enumerate(ids, start=1):
        if not s:
            raise ParseError("empty id", path, i)
    return ids


def parse_expression(path, cells_path=None, genes_path=None) -> ExpressionMatrix:
    """Read a MatrixMarket coordinate count file (rows = cells, 1-based).

    Sidecars default to ``cells.txt`` / ``genes.txt`` next to ``path``.
    Duplicate ``(cell, gene)`` triplets are summed with a warning.
    """
    path = Path(path)
    cells_path = Path(cells_path) if cells_path else path.parent / "cells.txt"
    genes_path = Path(genes_path) if genes_path else path.parent / "genes.txt"

    rows: list[int] = []
    cols: list[int] = []
    vals: list[int] = []
    shape = None
    declared_nnz = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if lineno == 1:
                if " ".join(line.lower().split()) != MM_HEADER:
                    raise ParseError(f"expected header '{MM_HEADER}', got '{line}'", path, lineno)
                continue
            if not line or line.startswith("%"):
                continue
            tok = line.split()
            if shape is None:
                if len(tok) != 3:
                    raise ParseError("size line must be 'rows cols nnz'", path, lineno)
                try:
                    n_r, n_c, declared_nnz = (int(t) for t in tok)
                except ValueError:
                    raise ParseError(f"non-integer size line '{line}'", path, lineno) from None
                if min(n_r, n_c, declared_nnz) < 0:
                    raise ParseError("negative size", path, lineno)
                shape = (n_r, n_c)
                continue
            if len(tok) != 3:
                raise ParseError(f"expected 3 fields, got {len(tok)}", path, lineno)
            try:
                i, j, v = int(tok[0]), int(tok[1]), int(tok[2])
            except ValueError:
                raise ParseError(f"non-integer token in '{line}'", path, lineno) from None
            if not (1 <= i <= shape[0]):
                raise ParseError(f"cell index {i} outside 1..{shape[0]}", path, lineno)
            if not (1 <= j <= shape[1]):
                raise ParseError(f"gene index {j} outside 1..{shape[1]}", path, lineno)
            if v < 0:
                raise ParseError(f"negative count {v}", path, lineno)
            rows.append(i - 1)
            cols.append(j - 1)
            vals.append(v)
    if shape is None:
        raise ParseError("missing size line", path)
    if len(vals) != declared_nnz:
        raise ParseError(f"header declares {declared_nnz} entries, found {len(vals)}", path)

    cell_ids = _read_id_list(cells_path)
    gene_names = [canonical_gene(g) for g in _read_id_list(genes_path)]
    if len(cell_ids) != shape[0]:
        raise ParseError(f"{len(cell_ids)} ids for {shape[0]} rows", cells_path)
    if len(gene_names) != shape[1]:
        raise ParseError(f"{len(gene_names)} ids for {shape[1]} columns", genes_path)

    key = np.asarray(rows, dtype=np.int64) * max(shape[1], 1) + np.asarray(cols, dtype=np.int64)
    n_dup = len(key) - len(np.unique(key))
    if n_dup:
        warnings.warn(f"{path}: {n_dup} duplicate (cell, gene) entries summed", stacklevel=2)
    m = sp.coo_matrix(
        (np.asarray(vals, dtype=np.int64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=shape,
    ).tocsr()  # coo -> csr sums duplicates
    m.sort_indices()
    return ExpressionMatrix(m, tuple(cell_ids), tuple(gene_names))


def write_expression(matrix: ExpressionMatrix, directory, name: str = "matrix.mtx") -> Path:
    """Write ``name`` plus ``cells.txt`` / ``genes.txt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trip = matrix.triplets()
    lines = [MM_HEADER.replace("%%matrixmarket", "%%MatrixMarket"),
             f"{matrix.n_cells} {matrix.n_genes} {len(trip)}"]
    lines += [f"{r + 1} {c + 1} {v}" for r, c, v in trip]
    out = directory / name
    out.write_text("\n".join(lines) + "\n")
    (directory / "cells.txt").write_text("".join(f"{c}\n" for c in matrix.cell_ids))
    (directory / "genes.txt").write_text("".join(f"{g}\n" for g in matrix.gene_names))
    return out


# --------------------------------------------------------------------------
# boundaries


@dataclass(frozen=True, eq=False)
class CellRecord:
    """One nucleus: polygon in slide pixels plus its rasterized interior."""

    cell_id: str
    boundary: np.ndarray
    centroid: tuple[float, float]
    area_px: int
    pixel_ys: np.ndarray = field(repr=False)
    pixel_xs: np.ndarray = field(repr=False)
    tissue: str | None = None

    @classmethod
    def from_polygon(cls, cell_id: str, points, tissue: str | None = None) -> "CellRecord":
        v = as_vertices(points)
        if len(v) < 3:
            raise ValidationError(f"cell {cell_id!r}: polygon needs >= 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"cell {cell_id!r}: non-finite coordinates")
        if polygon_area(v) == 0.0:
            raise ValidationError(f"cell {cell_id!r}: polygon has zero area")
        ys, xs = rasterize_polygon(v)
        if len(xs) == 0:
            raise ValidationError(f"cell {cell_id!r}: polygon covers no pixel center")
        centroid = (float(xs.mean()), float(ys.mean()))
        ys.setflags(write=False)
        xs.setflags(write=False)
        v.setflags(write=False)
        return cls(cell_id, v, centroid, int(len(xs)), ys, xs, tissue)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Pixel bounding box ``(x_min, y_min, x_max, y_max)``, inclusive."""
        return (int(self.pixel_xs.min()), int(self.pixel_ys.min()),
                int(self.pixel_xs.max()), int(self.pixel_ys.max()))


def parse_boundaries(path) -> list[CellRecord]:
    """Read a GeoJSON FeatureCollection of Polygon features keyed by ``cell_id``.

    Only the exterior ring of each polygon is used.
    """
    path = Path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if doc.get("type") != "FeatureCollection":
        raise ParseError("top-level object must be a FeatureCollection", path)
    records = []
    seen: dict[str, int] = {}
    for idx, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        cid = props.get("cell_id")
        if cid is None:
            raise ParseError(f"feature {idx} lacks property 'cell_id'", path)
        cid = str(cid)
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ParseError(f"feature {idx} ({cid}): geometry must be Polygon", path)
        rings = geom.get("coordinates") or []
        if not rings:
            raise ParseError(f"feature {idx} ({cid}): empty coordinates", path)
        if cid in seen:
            raise ValidationError(f"{path}: duplicate cell_id {cid!r} (features {seen[cid]} and {idx})")
        seen[cid] = idx
        tissue = props.get("tissue")
        records.append(CellRecord.from_polygon(cid, rings[0], tissue))
    return records


def write_boundaries(cells: Iterable[CellRecord], path) -> Path:
    feats = []
    for c in cells:
        ring = [[float(x), float(y)] for x, y in c.boundary]
        ring.append(ring[0])
        props = {"cell_id": c.cell_id}
        if c.tissue is not None:
            props["tissue"] = c.tissue
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Polygon", "coordinates": [ring]}})
    path = Path(path)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": feats}, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# marker knowledge


@dataclass(frozen=True)
class MarkerEntry:
    gene: str
    cell_type: str
    organ: str
    source: str
    category: str


@dataclass(frozen=True, eq=False)
class MarkerDatabase:
    """Gene -> cell type -> coarse category entries from one or more sources."""

    entries: tuple[MarkerEntry, ...]
    category_map: dict[str, str]
    unmapped: Counter = field(default_factory=Counter)

    def __post_init__(self):
        bad = {e.category for e in self.entries} - set(CATEGORIES)
        if bad:
            raise ValidationError(f"invalid categories {sorted(bad)}")
        index: dict[str, list[MarkerEntry]] = {}
        for e in self.entries:
            index.setdefault(e.gene, []).append(e)
        object.__setattr__(self, "_by_gene", index)

    def lookup(self, gene: str, organ: str | None = None) -> list[MarkerEntry]:
        """Entries for ``gene``; with ``organ`` set, only that organ or wildcard."""
        found = self._by_gene.get(canonical_gene(gene), [])
        if organ is None:
            return list(found)
        o = canonical_organ(organ)
        return [e for e in found if e.organ == WILDCARD or e.organ == o]

    @classmethod
    def from_records(cls, rows: Iterable[tuple[str, str, str, str]], category_map: dict[str, str]):
        """Build from ``(gene, cell_type, organ, source)`` tuples."""
        cmap = {k.strip().lower(): v for k, v in category_map.items()}
        entries = []
        unmapped: Counter = Counter()
        for gene, cell_type, organ, source in rows:
            cat = cmap.get(cell_type.strip().lower())
            if cat is None:
                cat = "Unknown"
                unmapped[cell_type.strip()] += 1
            organ = organ.strip()
            entries.append(MarkerEntry(canonical_gene(gene), cell_type.strip(),
                                       WILDCARD if organ == WILDCARD else canonical_organ(organ),
                                       source.strip(), cat))
        if unmapped:
            logger.info("%d marker entries with unmapped cell type -> Unknown", sum(unmapped.values()))
        return cls(tuple(entries), dict(category_map), unmapped)


def _read_tsv(path, required: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in required:
            if col not in header:
                raise ParseError(f"missing required column '{col}'", path, 1)
        reader.fieldnames = header
        out = []
        for row in reader:
            if not any((v or "").strip() for v in row.values() if isinstance(v, str)):
                continue
            missing = [c for c in required if not (row.get(c) or "").strip()]
            if missing:
                raise ParseError(f"empty value for column '{missing[0]}'", path, reader.line_num)
            out.append((reader.line_num, row))
    return out


def parse_category_map(path) -> dict[str, str]:
    cmap: dict[str, str] = {}
    for lineno, row in _read_tsv(path, ("cell_type", "category")):
        cat = row["category"].strip()
        if cat not in CATEGORIES:
            raise ParseError(f"category {cat!r} not in {CATEGORIES}", path, lineno)
        cmap[row["cell_type"].strip()] = cat
    return cmap


def parse_marker_db(paths: Sequence, category_map) -> MarkerDatabase:
    """Merge marker TSVs (``gene, cell_type, organ, source``) under a category map.

    ``category_map`` may be a path to a ``cell_type, category`` TSV or a dict.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    cmap = category_map if isinstance(category_map, dict) else parse_category_map(category_map)
    rows = []
    for p in paths:
        for _, row in _read_tsv(p, ("gene", "cell_type", "organ", "source")):
            rows.append((row["gene"], row["cell_type"], row["organ"], row["source"]))
    return MarkerDatabase.from_records(rows, cmap)


@dataclass(frozen=True)
class CancerGeneSet:
    genes: frozenset[str]
    sources: tuple[str, ...] = ()

    def __contains__(self, gene: str) -> bool:
        return canonical_gene(gene) in self.genes

    def __len__(self) -> int:
        return len(self.genes)


def parse_cancer_genes(paths: Sequence) -> CancerGeneSet:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    genes: set[str] = set()
    sources: set[str] = set()
    for p in paths:
        for _, row in _read_tsv(p, ("gene", "source")):
            genes.add(canonical_gene(row["gene"]))
            sources.add(row["source"].strip())
    return CancerGeneSet(frozenset(genes), tuple(sorted(sources)))


# --------------------------------------------------------------------------
# slide manifest


@dataclass(frozen=True)
class SlideManifest:
    tissue: str
    width: int
    height: int
    mpp: float
    files: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"slide extent must be positive, got {self.width}x{self.height}")
        if not self.mpp > 0:
            raise ValidationError(f"microns-per-pixel must be positive, got {self.mpp}")


def parse_manifest(path) -> SlideManifest:
    path = Path(path)
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got '{line}'", path, lineno)
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    for key in ("tissue", "width", "height", "mpp"):
        if key not in kv:
            raise ParseError(f"missing key '{key}'", path)
    try:
        width, height, mpp = int(kv.pop("width")), int(kv.pop("height")), float(kv.pop("mpp"))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None
    return SlideManifest(kv.pop("tissue"), width, height, mpp, kv)


def clip_to_extent(cells: Sequence[CellRecord], manifest: SlideManifest):
    """Clip boundaries to the slide rectangle.

    Returns ``(kept_cells, clipped_ids, dropped_ids)``; cells whose clipped
    polygon covers no pixel are dropped.
    """
    kept, clipped, dropped = [], [], []
    for c in cells:
        v = c.boundary
        inside = (v[:, 0].min() >= 0 and v[:, 1].min() >= 0
                  and v[:, 0].max() <= manifest.width and v[:, 1].max() <= manifest.height)
        if inside:
            kept.append(c)
            continue
        clipped.append(c.cell_id)
        poly = clip_polygon_to_rect(v, manifest.width, manifest.height)
        try:
            kept.append(CellRecord.from_polygon(c.cell_id, poly, c.tissue))
        except ValidationError:
            dropped.append(c.cell_id)
    if clipped:
        logger.warning("%d boundaries exceed slide extent and were clipped (%d dropped)",
                       len(clipped), len(dropped))
    return kept, clipped, dropped


# --------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class DropReport:
    missing_boundary: int
    missing_expression: int


@dataclass(frozen=True, eq=False)
class AlignedDataset:
    """Expression rows and boundaries joined on ``cell_id`` (sorted)."""

    matrix: ExpressionMatrix
    cells: tuple[CellRecord, ...]
    dropped: DropReport
    zero_count_cells: frozenset[str]

    @property
    def cell_ids(self) -> tuple[str, ...]:
        return self.matrix.cell_ids

    def equals(self, other: "AlignedDataset") -> bool:
        return (
            self.matrix.equals(other.matrix)
            and [c.cell_id for c in self.cells] == [c.cell_id for c in other.cells]
            and all(np.array_equal(a.boundary, b.boundary) for a, b in zip(self.cells, other.cells))
            and self.zero_count_cells == other.zero_count_cells
        )


def align(matrix: ExpressionMatrix, cells: Sequence[CellRecord]) -> AlignedDataset:
    """Inner join on cell id; row order is sorted cell id."""
    by_id = {c.cell_id: c for c in cells}
    expr_ids = set(matrix.cell_ids)
    shared = sorted(expr_ids & by_id.keys())
    if not shared:
        raise ValidationError("expression matrix and boundaries share no cell ids")
    report = DropReport(len(expr_ids) - len(shared), len(by_id) - len(shared))
    if report.missing_boundary or report.missing_expression:
        logger.info("align: dropped %d cells without boundary, %d without expression",
                    report.missing_boundary, report.missing_expression)
    sub = matrix.select_cells(shared)
    return AlignedDataset(sub, tuple(by_id[c] for c in shared), report, sub.zero_count_cells())
