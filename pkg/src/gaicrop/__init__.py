"""Grid-anchor image cropping: constrained candidate enumeration, an
RoI+RoD crop scoring model with its own autodiff core, rank-correlation
evaluation metrics, dataset tooling, and a human annotation service."""

from .grid import (
    AnchorPair,
    CropBox,
    GridSpec,
    GridSpecError,
    ImageDims,
    anchor_center,
    candidates_to_jsonl,
    count_candidates,
    crop_from_anchors,
    enumerate_candidates,
    passes_area_constraint,
    passes_aspect_constraint,
)
from .metrics import (
    EvalReport,
    MetricError,
    ScorePair,
    acc_k_n,
    avg_acc_n,
    baseline_c,
    baseline_l,
    baseline_n,
    bde,
    evaluate,
    iou,
    mean_srcc,
    nearest_anchor_box,
    srcc,
)
from .dataset import (
    AnnotatedImage,
    CropAnnotation,
    Dataset,
    DatasetError,
    DatasetSplit,
    compute_mos,
    consistency_fraction,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .model import CropScore, FeatureMap, ModelConfig, ModelError
from .estimator import CropScorer

__version__ = "0.1.0"
