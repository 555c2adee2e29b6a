"""Brain tumor segmentation on CE-MRI slices.

Pipeline: ingest the v7.3 MAT archive into a PNG dataset with deterministic
splits, train one of five U-Net family variants from scratch, evaluate with
pooled or per-image confusion metrics, and render comparison reports.
"""

from .data import SliceDataset
from .ingest import (
    CLASS_NAMES,
    ManifestEntry,
    RecordReport,
    SplitManifest,
    TumorRecord,
    export_dataset,
    load_mat_dir,
    load_mat_record,
    make_splits,
    normalize_image,
    proportional_counts,
    read_manifest,
    validate_record,
    write_manifest,
)
from .metrics import (
    ConfusionCounts,
    MetricReport,
    binarize,
    compute_metrics,
    confusion_counts,
    evaluate_split,
    mean_iou_per_image,
)
from .models import (
    ArchConfig,
    BACKBONES,
    FAMILIES,
    build_model,
    load_model,
    param_count,
    save_model,
    table_configs,
)
from .reporting import (
    ComparisonSet,
    metrics_table,
    pick_qualitative_stems,
    pr_chart,
    qualitative_grid,
)
from .training import (
    AdamState,
    RunHistory,
    TrainConfig,
    adam_step,
    bce_loss,
    select_checkpoint,
    train_run,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "AdamState",
    "BACKBONES",
    "CLASS_NAMES",
    "ComparisonSet",
    "ConfusionCounts",
    "FAMILIES",
    "ManifestEntry",
    "MetricReport",
    "RecordReport",
    "RunHistory",
    "SliceDataset",
    "SplitManifest",
    "TrainConfig",
    "TumorRecord",
    "adam_step",
    "bce_loss",
    "binarize",
    "build_model",
    "compute_metrics",
    "confusion_counts",
    "evaluate_split",
    "export_dataset",
    "load_mat_dir",
    "load_mat_record",
    "load_model",
    "make_splits",
    "mean_iou_per_image",
    "metrics_table",
    "normalize_image",
    "param_count",
    "pick_qualitative_stems",
    "pr_chart",
    "proportional_counts",
    "qualitative_grid",
    "read_manifest",
    "save_model",
    "select_checkpoint",
    "table_configs",
    "train_run",
    "validate_record",
    "write_manifest",
]
