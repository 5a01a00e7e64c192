"""boxclean: clean noisy crowdsourced bounding-box labels with a small,
targeted expert budget.

Step 1 trains two lightweight reference models — one on a growing expert-
verified set, one on a consensus subset of it — cross-matches their
predictions with the crowd labels, and spends the expert budget on the images
where the sources disagree most. Step 2 grades every remaining label by how
the sources overlap, fixes the confident cases automatically, and routes only
the ambiguous ones to a cheap human review queue.
"""

from .budget import Action, Actor, BudgetLedger, CostModel, budget_percent
from .consensus import build_consensus_increment
from .correction import (
    CorrectionConfig,
    DecisionRecord,
    ReviewItem,
    ReviewStatus,
    apply_decisions,
    bib_filter,
    build_review_queue,
    prepare_correction,
)
from .data import AnnotationSet, ImageInfo, Label, Source, load_coco, save_coco
from .detector import (
    DetectorConfig,
    DetectorSkill,
    ExternalDetectorBackend,
    SimulatedDetectorBackend,
    fit_simulated,
    predict_simulated,
)
from .errors import (
    BoxcleanError,
    ConfigError,
    DataFormatError,
    ExternalDetectorError,
    StateError,
)
from .evaluation import EvalReport, ap50, evaluate_labels, label_quality, render_table, tide_decompose
from .geometry import Box, iou, overlap_fraction
from .loop import LoopConfig, PipelineState, initialize, run_full, run_iteration
from .matching import (
    MatchCluster,
    RegionPartition,
    classify_regions,
    classify_single_model,
    image_score,
    match_cross_source,
    partition_image,
)
from .noise import CorpusSpec, NoiseSpec, assign_difficulty, corrupt, make_corpus
from .oracles import TruthExpert, TruthReviewer
from .pipeline import EvalConfig, RunConfig, finalize_run, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Actor",
    "AnnotationSet",
    "Box",
    "BoxcleanError",
    "BudgetLedger",
    "ConfigError",
    "CorpusSpec",
    "CorrectionConfig",
    "CostModel",
    "DataFormatError",
    "DecisionRecord",
    "DetectorConfig",
    "DetectorSkill",
    "EvalConfig",
    "EvalReport",
    "ExternalDetectorBackend",
    "ExternalDetectorError",
    "ImageInfo",
    "Label",
    "LoopConfig",
    "MatchCluster",
    "NoiseSpec",
    "PipelineState",
    "RegionPartition",
    "ReviewItem",
    "ReviewStatus",
    "RunConfig",
    "SimulatedDetectorBackend",
    "Source",
    "StateError",
    "TruthExpert",
    "TruthReviewer",
    "ap50",
    "apply_decisions",
    "assign_difficulty",
    "bib_filter",
    "budget_percent",
    "build_consensus_increment",
    "build_review_queue",
    "classify_regions",
    "classify_single_model",
    "corrupt",
    "evaluate_labels",
    "finalize_run",
    "fit_simulated",
    "image_score",
    "initialize",
    "iou",
    "label_quality",
    "load_coco",
    "make_corpus",
    "match_cross_source",
    "overlap_fraction",
    "partition_image",
    "predict_simulated",
    "prepare_correction",
    "render_table",
    "run_full",
    "run_iteration",
    "run_pipeline",
    "save_coco",
    "tide_decompose",
]
