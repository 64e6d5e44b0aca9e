"""Turn spatial transcriptomics measurements into nuclei segmentation and
classification targets, and score predictions against them."""

from .cluster import ClusterAssignment, leiden, quality
from .config import PipelineConfig, load_config
from .deg import DEGTable, top_n, wilcoxon_one_vs_rest
from .errors import ParseError, StageError, ValidationError
from .ingest import (
    AlignedDataset,
    CancerGeneSet,
    CellRecord,
    ExpressionMatrix,
    MarkerDatabase,
    SlideManifest,
    align,
    parse_boundaries,
    parse_cancer_genes,
    parse_expression,
    parse_manifest,
    parse_marker_db,
)
from .labeling import (
    CategoryScore,
    CellLabelTable,
    ClusterLabeling,
    classify_cluster,
    label_clusters,
    neoplastic_refine,
    propagate,
    vote,
)
from .metrics import MetricReport, bpq, classification_scores, dice_jaccard, match_and_detect
from .pipeline import Pipeline, run_pipeline
from .preprocess import Embedding, NeighborGraph, knn_graph, normalize_log, pca
from .tiling import PatchSpec, TargetMaps, index_set, make_patches, rasterize, write_dataset

__version__ = "0.1.0"
