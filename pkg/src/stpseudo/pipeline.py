"""Stage runner: ingest -> cluster -> deg -> label -> tile, cached on disk.

Every stage writes its outputs under ``<out>/<stage>/`` and finishes with a
``stage.json`` stamp holding the cache key, a hash of (config, input file
contents). A stage whose stamp matches is skipped; a stage whose predecessor
stamp is missing or stale fails with the predecessor's name.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import cluster as cluster_mod
from . import deg as deg_mod
from . import ingest, labeling, preprocess, tiling
from .config import PipelineConfig
from .errors import StageError, ValidationError

logger = logging.getLogger(__name__)

STAGES = ("ingest", "cluster", "deg", "label", "tile")
_REQUIRES = {"cluster": "ingest", "deg": "cluster", "label": "deg", "tile": "label"}
_REQUIRED_MSG = {"ingest": "ingest required", "cluster": "clustering required",
                 "deg": "differential expression required", "label": "labeling required"}


def _sha256_files(files: dict[str, Path]) -> str:
    h = hashlib.sha256()
    for role in sorted(files):
        h.update(role.encode() + b"\0")
        h.update(hashlib.sha256(Path(files[role]).read_bytes()).digest())
    return h.hexdigest()


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Pipeline:
    """Runs stages for one config into one output directory."""

    def __init__(self, config: PipelineConfig, out: Path | None = None, threads: int = 1):
        self.config = config
        self.out = Path(out or config.out or "stpseudo-out")
        self.threads = max(1, int(threads))
        self.config_hash = config.hash()
        self._key = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def key(self) -> str:
        """Cache key: config hash + input content hash."""
        if self._key is None:
            files = self.config.input_files()
            missing = [f"{role}={p}" for role, p in files.items() if not Path(p).is_file()]
            if missing:
                msg = "missing input file(s): " + ", ".join(missing)
                raise StageError("ingest", msg) from FileNotFoundError(msg)
            try:
                input_hash = _sha256_files(files)
            except OSError as exc:
                raise StageError("ingest", f"cannot read inputs: {exc}") from exc
            self._key = hashlib.sha256(f"{self.config_hash}:{input_hash}".encode()).hexdigest()
        return self._key

    def stage_dir(self, stage: str) -> Path:
        return self.out / ("dataset" if stage == "tile" else stage)

    def is_cached(self, stage: str) -> bool:
        stamp = self.stage_dir(stage) / "stage.json"
        if not stamp.is_file():
            return False
        try:
            doc = json.loads(stamp.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        return doc.get("key") == self.key

    def _stamp(self, stage: str, extra: dict | None = None):
        doc = {"stage": stage, "key": self.key, "config_hash": self.config_hash,
               "config": self.config.echo()}
        if extra:
            doc["report"] = extra
        _dump_json(self.stage_dir(stage) / "stage.json", doc)

    def _require(self, stage: str):
        pred = _REQUIRES.get(stage)
        if pred and not self.is_cached(pred):
            raise StageError(stage, f"{_REQUIRED_MSG[pred]} (run '{pred}' first)")

    # -- driver ---------------------------------------------------------------

    def run(self, stages=STAGES, force: bool = False) -> dict[str, str]:
        """Run ``stages`` in order; returns ``{stage: 'computed' | 'cached'}``."""
        _ = self.key  # validates inputs before anything is written
        status = {}
        for stage in stages:
            if not force and self.is_cached(stage):
                logger.info("%s: cached", stage)
                status[stage] = "cached"
                continue
            self._require(stage)
            try:
                getattr(self, f"_run_{stage}")()
            except (StageError, OSError):
                raise
            except ValidationError as exc:
                raise StageError(stage, str(exc)) from exc
            logger.info("%s: computed", stage)
            status[stage] = "computed"
        return status

    # -- loaders --------------------------------------------------------------

    def load_aligned(self) -> ingest.AlignedDataset:
        d = self.stage_dir("ingest")
        matrix = ingest.parse_expression(d / "matrix.mtx")
        cells = ingest.parse_boundaries(d / "boundaries.geojson")
        return ingest.align(matrix, cells)

    def load_slide(self) -> ingest.SlideManifest:
        return ingest.parse_manifest(self.config.manifest)

    def load_assignment(self, cell_ids):
        _, labels = cluster_mod.read_assignment(self.stage_dir("cluster") / "assignment.tsv", cell_ids)
        return labels

    def load_deg(self, n_clusters: int, gene_names) -> deg_mod.DEGTable:
        return deg_mod.read_deg(self.stage_dir("deg") / "deg.tsv", n_clusters, gene_names)

    # -- stages ---------------------------------------------------------------

    def _run_ingest(self):
        cfg = self.config
        files = cfg.input_files()
        matrix = ingest.parse_expression(cfg.expression, files["cells"], files["genes"])
        cells = ingest.parse_boundaries(cfg.boundaries)
        slide = ingest.parse_manifest(cfg.manifest)
        cells, clipped, dropped = ingest.clip_to_extent(cells, slide)
        db = ingest.parse_marker_db(list(cfg.markers), cfg.category_map)
        if cfg.neoplastic_refinement:
            cancer = ingest.parse_cancer_genes(list(cfg.cancer_genes))
            if len(cancer) == 0:
                raise ValidationError("cancer gene set is empty")
        ds = ingest.align(matrix, cells)
        d = self.stage_dir("ingest")
        d.mkdir(parents=True, exist_ok=True)
        ingest.write_expression(ds.matrix, d)
        ingest.write_boundaries(ds.cells, d / "boundaries.geojson")
        (d / "zero_count.txt").write_text("".join(f"{c}\n" for c in sorted(ds.zero_count_cells)))
        self._stamp("ingest", {
            "n_cells": ds.matrix.n_cells,
            "n_genes": ds.matrix.n_genes,
            "dropped_missing_boundary": ds.dropped.missing_boundary,
            "dropped_missing_expression": ds.dropped.missing_expression,
            "clipped_to_extent": sorted(clipped),
            "dropped_outside_extent": sorted(dropped),
            "zero_count_cells": len(ds.zero_count_cells),
            "marker_entries": len(db.entries),
            "unmapped_cell_types": dict(sorted(db.unmapped.items())),
        })

    def _run_cluster(self):
        cfg = self.config
        ds = self.load_aligned()
        x = preprocess.normalize_log(ds.matrix, cfg.target_sum)
        n_varying = int(np.count_nonzero(np.ptp(x, axis=0) > 0))
        n_comp = max(1, min(cfg.n_components, ds.matrix.n_cells, n_varying))
        if n_comp != cfg.n_components:
            logger.warning("n_components capped at %d by data shape", n_comp)
        emb = preprocess.pca(x, n_comp, cfg.seed)
        graph = preprocess.knn_graph(emb, min(cfg.k, ds.matrix.n_cells - 1))
        assignment = cluster_mod.leiden(graph, cfg.resolution, cfg.seed, cfg.max_iterations)
        d = self.stage_dir("cluster")
        d.mkdir(parents=True, exist_ok=True)
        preprocess.write_embedding(emb, d / "embedding.bin")
        preprocess.write_edges(graph, d / "edges.tsv")
        cluster_mod.write_assignment(assignment, ds.cell_ids, d / "assignment.tsv")
        self._stamp("cluster", {
            "n_clusters": assignment.n_clusters,
            "quality": assignment.quality,
            "objective": assignment.objective,
            "resolution": assignment.resolution,
            "iterations": assignment.n_iterations,
            "n_components": n_comp,
            "n_edges": graph.n_edges,
        })

    def _run_deg(self):
        cfg = self.config
        ds = self.load_aligned()
        labels = self.load_assignment(ds.cell_ids)
        x = preprocess.normalize_log(ds.matrix, cfg.target_sum)
        table = deg_mod.wilcoxon_one_vs_rest(x, labels, ds.matrix.gene_names, threads=self.threads)
        d = self.stage_dir("deg")
        d.mkdir(parents=True, exist_ok=True)
        deg_mod.write_deg(table, d / "deg.tsv")
        self._stamp("deg", {"n_clusters": table.n_clusters,
                            "clusters_without_rest": sorted(table.empty_clusters)})

    def _run_label(self):
        cfg = self.config
        ds = self.load_aligned()
        labels = self.load_assignment(ds.cell_ids)
        table = self.load_deg(int(labels.max()) + 1, ds.matrix.gene_names)
        db = ingest.parse_marker_db(list(cfg.markers), cfg.category_map)
        cancer = ingest.parse_cancer_genes(list(cfg.cancer_genes)) if cfg.neoplastic_refinement else None
        tissue = self.load_slide().tissue
        per_cluster = labeling.label_clusters(table, db, tissue, cancer, cfg.N, cfg.M, cfg.tau_vote,
                                              cfg.tau_cancer, cfg.binary_votes)
        cells = labeling.propagate(per_cluster, labels, ds.cell_ids, ds.zero_count_cells)
        d = self.stage_dir("label")
        d.mkdir(parents=True, exist_ok=True)
        labeling.write_labels(cells, d / "labels.tsv")
        labeling.write_cluster_report(per_cluster, d / "clusters.tsv")
        counts: dict[str, int] = {}
        for lab in cells.labels:
            counts[lab] = counts.get(lab, 0) + 1
        self._stamp("label", {"cells_per_label": dict(sorted(counts.items())),
                              "fallback_clusters": sum(c.used_fallback for c in per_cluster)})

    def _run_tile(self):
        cfg = self.config
        ds = self.load_aligned()
        cells_table = labeling.read_labels(self.stage_dir("label") / "labels.tsv")
        slide = self.load_slide()
        patches = tiling.make_patches(slide, cfg.patch_size, cfg.stride)
        d = self.stage_dir("tile")
        tiling.write_dataset(d, patches, ds.cells, cells_table.as_dict(), slide, cfg.patch_size, cfg.stride,
                             config=self.config.echo(), config_hash=self.config_hash, threads=self.threads)
        self._stamp("tile", {"n_patches": len(patches)})


def run_pipeline(config: PipelineConfig, out=None, threads: int = 1, stages=STAGES) -> dict[str, str]:
    return Pipeline(config, out, threads).run(stages)
