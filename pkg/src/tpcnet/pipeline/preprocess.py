"""Raw event logs -> model-ready dataset directory.

All statistics that could leak information — scaling percentiles, the
diagnosis codebook, feature means — are fitted on the training split
only.  Each stay is processed independently and causally: the tensors at
hour t depend only on events with offsets up to minute 60*t.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import DatasetError
from .diagnoses import PREVALENCE_CUTOFF, build_codebook, encode_diagnoses
from .events import (
    CLOCK_FEATURES,
    clock_feature_rows,
    forward_fill_with_decay,
    resample_hourly,
)
from .records import (
    DEFAULT_HORIZON_HOURS,
    Dataset,
    MIN_STAY_HOURS,
    StayRecord,
    los_label_curve,
    save_dataset,
    split_cohort,
    validate_record,
)
from .scaling import FeatureScale, fit_feature_scale, scale_value

log = logging.getLogger(__name__)

# Diagnoses must be on the chart before predictions begin at hour 5.
DIAGNOSIS_CUTOFF_MINUTES = 300.0
# A feature observed in fewer than half of in-ICU hours is lab-like.
LAB_RATE_THRESHOLD = 0.5
_RESERVED_STAY_COLUMNS = ("stay_id", "patient_id", "length_hours", "admission_hour", "mortality")


def stay_tensors(
    stay_events,
    feature_names: list[str],
    scales: dict[str, FeatureScale],
    admission_hour: int,
    n_hours: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled, forward-filled (values, decay) tensors for one stay.

    ``feature_names`` is the canonical order including the two clock
    rows; ``stay_events`` yields (feature_name, offset_minutes, value)
    for the raw features only.  Never-observed cells impute the scaled
    training midpoint 0 with decay 0.
    """
    raw_names = [n for n in feature_names if n not in CLOCK_FEATURES]
    grid, seed = resample_hourly(stay_events, raw_names, n_hours)
    for i, name in enumerate(raw_names):
        grid[i] = scale_value(grid[i], scales[name])
        seed[i] = scale_value(seed[i], scales[name])
    values, decay = forward_fill_with_decay(grid, seed)
    values = np.nan_to_num(values, nan=0.0)

    clock_raw = clock_feature_rows(admission_hour, n_hours)
    clock_scaled = np.stack(
        [scale_value(clock_raw[i], scales[name]) for i, name in enumerate(CLOCK_FEATURES)]
    )
    order = {name: i for i, name in enumerate(raw_names)}
    full_values = np.empty((len(feature_names), n_hours))
    full_decay = np.empty((len(feature_names), n_hours))
    for i, name in enumerate(feature_names):
        if name in CLOCK_FEATURES:
            full_values[i] = clock_scaled[CLOCK_FEATURES.index(name)]
            full_decay[i] = 1.0
        else:
            full_values[i] = values[order[name]]
            full_decay[i] = decay[order[name]]
    return full_values, full_decay


def _static_kinds(flat: pd.DataFrame) -> dict[str, str]:
    kinds = {}
    for col in flat.columns:
        series = flat[col]
        if not pd.api.types.is_numeric_dtype(series):
            kinds[col] = "categorical"
        elif set(pd.unique(series)) <= {0, 1}:
            kinds[col] = "binary"
        else:
            kinds[col] = "continuous"
    return kinds


def _encode_statics(
    stays: pd.DataFrame, train_ids: set[int]
) -> tuple[pd.DataFrame, dict[str, str], dict[str, FeatureScale]]:
    """Expand categoricals one-hot and percentile-scale continuous
    statics (fit on training stays; unseen categories encode all-zero)."""
    raw = stays.drop(columns=list(_RESERVED_STAY_COLUMNS)).set_index(stays["stay_id"])
    kinds = _static_kinds(raw)
    train_rows = stays["stay_id"].isin(train_ids).to_numpy()
    columns: dict[str, np.ndarray] = {}
    scales: dict[str, FeatureScale] = {}
    for col in sorted(raw.columns):
        series = raw[col]
        if kinds[col] == "categorical":
            categories = sorted(str(v) for v in pd.unique(series[train_rows]))
            for cat in categories:
                columns[f"{col}__{cat}"] = (series.astype(str) == cat).to_numpy(float)
        elif kinds[col] == "binary":
            columns[col] = series.to_numpy(float)
        else:
            scale = fit_feature_scale(series[train_rows].to_numpy(float))
            if scale.degenerate:
                log.warning("static %r is constant on the training split", col)
            scales[col] = scale
            columns[col] = np.asarray(scale_value(series.to_numpy(float), scale))
    encoded = pd.DataFrame(columns, index=raw.index)
    return encoded, kinds, scales


def preprocess_raw(
    raw_dir: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    horizon: int = DEFAULT_HORIZON_HOURS,
    prevalence_cutoff: float = PREVALENCE_CUTOFF,
) -> Dataset:
    """Convert a raw-event directory into a processed dataset directory."""
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    for fname in ("events.csv", "stays.csv", "diagnoses_raw.csv"):
        if not (raw_dir / fname).exists():
            raise DatasetError(f"raw directory {raw_dir} is missing {fname}")
    events = pd.read_csv(raw_dir / "events.csv", float_precision="round_trip")
    stays = pd.read_csv(raw_dir / "stays.csv", float_precision="round_trip")
    diagnoses = pd.read_csv(raw_dir / "diagnoses_raw.csv", float_precision="round_trip")
    if not stays["stay_id"].is_unique:
        raise DatasetError("stays.csv has duplicate stay_id rows")

    short = stays["length_hours"] < MIN_STAY_HOURS
    if short.any():
        log.warning(
            "dropping %d stays shorter than %d hours", int(short.sum()), MIN_STAY_HOURS
        )
        stays = stays[~short]
    if stays.empty:
        raise DatasetError("no stays meet the minimum-length cohort rule")
    stays = stays.reset_index(drop=True)
    kept_ids = set(stays["stay_id"].tolist())
    events = events[events["stay_id"].isin(kept_ids)]
    diagnoses = diagnoses[diagnoses["stay_id"].isin(kept_ids)]

    splits = split_cohort(stays["patient_id"].tolist(), ratios=ratios, seed=seed)
    train_patients = set(splits["train"])
    stay_patient = dict(zip(stays["stay_id"], stays["patient_id"]))
    train_stay_ids = {s for s, p in stay_patient.items() if p in train_patients}

    raw_feature_names = sorted(events["feature_name"].unique().tolist())
    clash = [n for n in raw_feature_names if n in CLOCK_FEATURES]
    if clash:
        raise DatasetError(f"raw feature names collide with clock features: {clash}")

    # Keep only events inside each stay's truncated window, so percentile
    # fitting sees exactly the values the tensors can see.
    length_by_stay = dict(zip(stays["stay_id"], stays["length_hours"]))
    window = events["stay_id"].map(
        lambda s: 60.0 * min(int(length_by_stay[s]), horizon)
    )
    events = events[events["offset_minutes"] <= window]

    train_events = events[events["stay_id"].isin(train_stay_ids)]
    in_icu = train_events[train_events["offset_minutes"] > 0]
    scales: dict[str, FeatureScale] = {}
    feature_names: list[str] = []
    for name in raw_feature_names:
        observed = in_icu[in_icu["feature_name"] == name]["value"].to_numpy(float)
        observed = observed[np.isfinite(observed)]
        if observed.size == 0:
            log.warning("dropping feature %r: no training observations", name)
            continue
        scales[name] = fit_feature_scale(observed)
        if scales[name].degenerate:
            log.warning("feature %r is constant on the training split", name)
        feature_names.append(name)
    if not feature_names:
        raise DatasetError("no time-series feature has training observations")

    # Clock rows get their own percentiles from the training stays.
    train_lengths = [
        min(int(length_by_stay[s]), horizon) for s in sorted(train_stay_ids)
    ]
    train_admissions = {
        int(row.stay_id): int(row.admission_hour)
        for row in stays.itertuples()
        if row.stay_id in train_stay_ids
    }
    icu_hours = np.concatenate([np.arange(1, t + 1) for t in train_lengths]).astype(float)
    tod_values = np.concatenate(
        [
            np.mod(train_admissions[s] + np.arange(1, min(int(length_by_stay[s]), horizon) + 1), 24)
            for s in sorted(train_stay_ids)
        ]
    ).astype(float)
    scales[CLOCK_FEATURES[0]] = fit_feature_scale(icu_hours)
    scales[CLOCK_FEATURES[1]] = fit_feature_scale(tod_values)
    feature_names = feature_names + list(CLOCK_FEATURES)

    # Lab-like features are the sparsely charted ones: classify by the
    # fraction of training in-ICU hours carrying at least one event.
    total_train_hours = float(sum(train_lengths))
    feature_kinds: dict[str, str] = {}
    seen = in_icu.assign(hour=np.ceil(in_icu["offset_minutes"] / 60.0).astype(int))
    hours_seen = (
        seen[["feature_name", "stay_id", "hour"]].drop_duplicates().groupby("feature_name").size()
    )
    for name in feature_names:
        if name in CLOCK_FEATURES:
            feature_kinds[name] = "clock"
        else:
            rate = float(hours_seen.get(name, 0)) / total_train_hours
            feature_kinds[name] = "lab" if rate < LAB_RATE_THRESHOLD else "vital"

    train_diag = diagnoses[
        diagnoses["stay_id"].isin(train_stay_ids)
        & (diagnoses["offset_minutes"] < DIAGNOSIS_CUTOFF_MINUTES)
    ]
    codebook = build_codebook(
        {
            int(s): group["code_path"].tolist()
            for s, group in train_diag.groupby("stay_id")
        },
        cutoff=prevalence_cutoff,
    )

    static_frame, static_kinds, static_scales = _encode_statics(
        stays, train_ids=train_stay_ids
    )
    static_names = list(static_frame.columns)

    early_diag = diagnoses[diagnoses["offset_minutes"] < DIAGNOSIS_CUTOFF_MINUTES]
    paths_by_stay = {
        int(s): group["code_path"].tolist() for s, group in early_diag.groupby("stay_id")
    }
    events_by_stay = dict(tuple(events.groupby("stay_id", sort=False)))

    records = []
    for row in stays.itertuples():
        stay_id = int(row.stay_id)
        n_hours = min(int(row.length_hours), horizon)
        group = events_by_stay.get(stay_id)
        stay_events = (
            group[group["feature_name"].isin(scales.keys())][
                ["feature_name", "offset_minutes", "value"]
            ].itertuples(index=False, name=None)
            if group is not None
            else ()
        )
        values, decay = stay_tensors(
            stay_events, feature_names, scales, int(row.admission_hour), n_hours
        )
        record = StayRecord(
            stay_id=stay_id,
            patient_id=int(row.patient_id),
            values=values,
            decay=decay,
            static=static_frame.loc[stay_id].to_numpy(float),
            diagnoses=encode_diagnoses(paths_by_stay.get(stay_id, []), codebook),
            los_labels=los_label_curve(int(row.length_hours), n_hours),
            mortality=int(row.mortality),
        )
        validate_record(record, horizon=horizon)
        records.append(record)

    train_records = [r for r in records if r.patient_id in train_patients]
    stacked = np.concatenate([r.values for r in train_records], axis=1)
    feature_means = [float(v) for v in stacked.mean(axis=1)]

    generator_meta = None
    gen_path = raw_dir / "generator.json"
    if gen_path.exists():
        generator_meta = json.loads(gen_path.read_text())

    meta = {
        "horizon_hours": horizon,
        "prediction_start_hour": MIN_STAY_HOURS,
        "split_seed": seed,
        "split_ratios": list(ratios),
        "splits": {k: [int(p) for p in v] for k, v in splits.items()},
        "stay_patients": {str(r.stay_id): r.patient_id for r in records},
        "feature_kinds": feature_kinds,
        "feature_means": feature_means,
        "scaling": {name: scales[name].to_dict() for name in feature_names},
        "static_kinds": static_kinds,
        "static_scaling": {k: v.to_dict() for k, v in static_scales.items()},
        "diagnosis_prevalence_cutoff": prevalence_cutoff,
        "codebook": codebook.to_dict(),
        "generator": generator_meta,
    }
    dataset = Dataset(
        records=records,
        feature_names=feature_names,
        static_names=static_names,
        diagnosis_names=list(codebook.nodes),
        meta=meta,
    )
    save_dataset(dataset, out_dir)
    log.info(
        "wrote %d stays (%d features, %d statics, %d diagnosis nodes) to %s",
        len(records),
        len(feature_names),
        len(static_names),
        len(codebook.nodes),
        out_dir,
    )
    return dataset
