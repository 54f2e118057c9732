"""Raw-event ingestion, synthetic cohorts, and the dataset contract."""

from .diagnoses import (
    DiagnosisCodebook,
    PREVALENCE_CUTOFF,
    build_codebook,
    encode_diagnoses,
    path_ancestors,
)
from .events import (
    CLOCK_FEATURES,
    DECAY_BASE,
    RawEvent,
    clock_feature_rows,
    forward_fill_with_decay,
    resample_hourly,
)
from .preprocess import preprocess_raw, stay_tensors
from .records import (
    DEFAULT_HORIZON_HOURS,
    Dataset,
    MIN_STAY_HOURS,
    PREDICTION_START_HOUR,
    StayRecord,
    load_dataset,
    los_label_curve,
    remaining_los_days,
    save_dataset,
    split_cohort,
    validate_record,
)
from .scaling import FeatureScale, fit_feature_scale, scale_value
from .synthetic import (
    GenConfig,
    LAB_FEATURES,
    VITAL_FEATURES,
    WIRED_FEATURES,
    generate_synthetic_cohort,
)

__all__ = [
    "CLOCK_FEATURES",
    "DECAY_BASE",
    "DEFAULT_HORIZON_HOURS",
    "Dataset",
    "DiagnosisCodebook",
    "FeatureScale",
    "GenConfig",
    "LAB_FEATURES",
    "MIN_STAY_HOURS",
    "PREDICTION_START_HOUR",
    "PREVALENCE_CUTOFF",
    "RawEvent",
    "StayRecord",
    "VITAL_FEATURES",
    "WIRED_FEATURES",
    "build_codebook",
    "clock_feature_rows",
    "encode_diagnoses",
    "fit_feature_scale",
    "forward_fill_with_decay",
    "generate_synthetic_cohort",
    "load_dataset",
    "los_label_curve",
    "path_ancestors",
    "preprocess_raw",
    "remaining_los_days",
    "resample_hourly",
    "save_dataset",
    "scale_value",
    "split_cohort",
    "stay_tensors",
    "validate_record",
]
