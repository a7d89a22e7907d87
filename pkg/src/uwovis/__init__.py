"""Open-vocabulary underwater instance segmentation, desk scale.

Pipeline: frozen seeded encoders -> multi-scale refinement -> gated
visual-geometric fusion -> query bridge -> prompt-selected classification
and mask heads, trained with Hungarian-matched losses and scored with a
grouped mask-AP evaluator.
"""

__version__ = "0.1.0"

from .data import (
    ClassSplit,
    DatasetIndex,
    FixtureSpec,
    build_class_split,
    load_annotations,
    make_task_config,
    synth_fixture,
)
from .encoders import (
    EncoderConfig,
    ImageSample,
    encode_geometry,
    encode_text,
    encode_visual,
)
from .evaluation import (
    EvalReport,
    InstancePrediction,
    compute_ap,
    evaluate_predictions,
    group_metrics,
    mask_iou,
    per_class_report,
)
from .losses import (
    Assignment,
    TargetSet,
    classification_loss,
    hungarian_match,
    mask_loss,
    total_loss,
)
from .saim import (
    ClassEmbeddings,
    SelectionConfig,
    TemplateBank,
    build_prompt_bank,
    compute_similarity_tensor,
    mean_spatial,
    select_templates_mixed,
    select_templates_weighted,
    select_with_single_image,
)
from .trainer import Checkpoint, Model, RunConfig, TrainingDiverged, infer, train

__all__ = [
    "__version__",
    "ClassSplit",
    "DatasetIndex",
    "FixtureSpec",
    "build_class_split",
    "load_annotations",
    "make_task_config",
    "synth_fixture",
    "EncoderConfig",
    "ImageSample",
    "encode_geometry",
    "encode_text",
    "encode_visual",
    "EvalReport",
    "InstancePrediction",
    "compute_ap",
    "evaluate_predictions",
    "group_metrics",
    "mask_iou",
    "per_class_report",
    "Assignment",
    "TargetSet",
    "classification_loss",
    "hungarian_match",
    "mask_loss",
    "total_loss",
    "ClassEmbeddings",
    "SelectionConfig",
    "TemplateBank",
    "build_prompt_bank",
    "compute_similarity_tensor",
    "mean_spatial",
    "select_templates_mixed",
    "select_templates_weighted",
    "select_with_single_image",
    "Checkpoint",
    "Model",
    "RunConfig",
    "TrainingDiverged",
    "infer",
    "train",
]
