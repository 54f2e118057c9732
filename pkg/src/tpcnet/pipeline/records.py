"""Processed stay records, the on-disk dataset contract, and cohort splits.

A dataset directory holds five files, all CSV with a header row except
the JSON metadata:

* ``timeseries.csv`` — stay_id, hour, then per feature ``f`` and
  ``f__decay`` in canonical feature order.
* ``flat.csv`` — stay_id, then one column per static feature.
* ``diagnoses.csv`` — stay_id, then one binary column per codebook node.
* ``labels.csv`` — stay_id, hour, remaining_los_days, mortality.
* ``meta.json`` — canonical feature order and kinds, scaling spec,
  codebook, patient splits, stay-to-patient map, training feature means,
  and the generator/preprocess provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ..config import LOS_CLIP_MIN_DAYS
from ..errors import DatasetError

DEFAULT_HORIZON_HOURS = 336
PREDICTION_START_HOUR = 5
MIN_STAY_HOURS = 5
SPLIT_NAMES = ("train", "val", "test")
DECAY_SUFFIX = "__decay"
_LABEL_STEP_TOL = 1e-9


@dataclass
class StayRecord:
    """One fully processed ICU stay."""

    stay_id: int
    patient_id: int
    values: np.ndarray  # [F, T] scaled, forward-filled
    decay: np.ndarray  # [F, T] observation recency in [0, 1]
    static: np.ndarray  # [S]
    diagnoses: np.ndarray  # [D] binary
    los_labels: np.ndarray  # [T] remaining days, clamped >= 1/48
    mortality: int

    @property
    def n_hours(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    """Stay records plus everything needed to interpret or refit them."""

    records: list[StayRecord]
    feature_names: list[str]
    static_names: list[str]
    diagnosis_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, stay_id: int) -> StayRecord:
        for record in self.records:
            if record.stay_id == stay_id:
                return record
        raise DatasetError(f"no stay {stay_id} in dataset")

    def split_records(self, split: str) -> list[StayRecord]:
        if split not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        patients = set(self.meta["splits"][split])
        return [r for r in self.records if r.patient_id in patients]

    def restrict_features(self, keep: list[str]) -> "Dataset":
        """A view of the dataset containing only the named feature rows
        (canonical order preserved); statics and diagnoses unchanged."""
        missing = [n for n in keep if n not in self.feature_names]
        if missing:
            raise DatasetError(f"cannot restrict to unknown features {missing}")
        idx = [i for i, n in enumerate(self.feature_names) if n in set(keep)]
        names = [self.feature_names[i] for i in idx]
        records = [
            StayRecord(
                stay_id=r.stay_id,
                patient_id=r.patient_id,
                values=r.values[idx],
                decay=r.decay[idx],
                static=r.static,
                diagnoses=r.diagnoses,
                los_labels=r.los_labels,
                mortality=r.mortality,
            )
            for r in self.records
        ]
        meta = dict(self.meta)
        meta["feature_means"] = [self.meta["feature_means"][i] for i in idx]
        meta["feature_kinds"] = {n: self.meta["feature_kinds"][n] for n in names}
        return Dataset(
            records=records,
            feature_names=names,
            static_names=self.static_names,
            diagnosis_names=self.diagnosis_names,
            meta=meta,
        )


def remaining_los_days(length_hours: int, hour: int) -> float:
    """Remaining stay duration in days at the end of ``hour``, clamped to
    the 30-minute floor so log losses stay finite."""
    return max((length_hours - hour) / 24.0, LOS_CLIP_MIN_DAYS)


def los_label_curve(length_hours: int, n_hours: int) -> np.ndarray:
    return np.array(
        [remaining_los_days(length_hours, t) for t in range(1, n_hours + 1)]
    )


def split_cohort(
    patient_ids,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> dict[str, list[int]]:
    """Deterministic by-patient split into train/val/test.

    Counts follow the largest-remainder rule so 100 patients at
    (0.7, 0.15, 0.15) give exactly 70/15/15; every split with a nonzero
    ratio receives at least one patient.
    """
    ids = sorted(set(int(p) for p in patient_ids))
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must sum to 1, got {ratios}")
    n_nonzero = sum(1 for r in ratios if r > 0)
    if len(ids) < n_nonzero:
        raise DatasetError(
            f"{len(ids)} patients cannot fill {n_nonzero} non-empty splits"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    exact = [r * len(ids) for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    # Largest remainder first; ties broken by split order.
    leftovers = sorted(
        range(3), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in leftovers[: len(ids) - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        while ratios[i] > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    splits, start = {}, 0
    for name, count in zip(SPLIT_NAMES, counts):
        splits[name] = sorted(shuffled[start : start + count])
        start += count
    return splits


# -- validation ---------------------------------------------------------------


def validate_record(record: StayRecord, horizon: int = DEFAULT_HORIZON_HOURS) -> None:
    """Check every stay-level invariant, naming the stay in any failure."""
    sid = record.stay_id
    f, t = record.values.shape
    if record.decay.shape != (f, t):
        raise DatasetError(f"stay {sid}: decay shape {record.decay.shape} != {(f, t)}")
    if t < MIN_STAY_HOURS:
        raise DatasetError(f"stay {sid}: only {t} hours; cohort requires >= {MIN_STAY_HOURS}")
    if t > horizon:
        raise DatasetError(f"stay {sid}: {t} hours exceeds the {horizon}-hour horizon")
    if not np.all(np.isfinite(record.values)):
        raise DatasetError(f"stay {sid}: non-finite cell in values")
    if np.any(np.isnan(record.decay)):
        raise DatasetError(f"stay {sid}: NaN cell in decay")
    if np.any((record.decay < 0.0) | (record.decay > 1.0)):
        raise DatasetError(f"stay {sid}: decay outside [0, 1]")
    if record.los_labels.shape != (t,):
        raise DatasetError(
            f"stay {sid}: {record.los_labels.shape[0]} labels for {t} hours"
        )
    labels = record.los_labels
    if np.any(labels < LOS_CLIP_MIN_DAYS):
        raise DatasetError(f"stay {sid}: label below the {LOS_CLIP_MIN_DAYS} floor")
    steps = labels[:-1] - labels[1:]
    clamped_end = labels[1:] == LOS_CLIP_MIN_DAYS
    good = (np.abs(steps - 1.0 / 24.0) < _LABEL_STEP_TOL) | clamped_end
    if not np.all(good):
        bad = int(np.argmin(good)) + 1
        raise DatasetError(
            f"stay {sid}: labels must fall by 1/24 per hour (hour {bad + 1})"
        )
    if record.mortality not in (0, 1):
        raise DatasetError(f"stay {sid}: mortality must be 0 or 1, got {record.mortality}")
    if not set(np.unique(record.diagnoses)) <= {0.0, 1.0}:
        raise DatasetError(f"stay {sid}: diagnosis vector is not binary")


# -- save / load --------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    ts_rows, label_rows, flat_rows, diag_rows = [], [], [], []
    for r in dataset.records:
        for t in range(r.n_hours):
            row = [r.stay_id, t + 1]
            for f in range(len(dataset.feature_names)):
                row.extend((r.values[f, t], r.decay[f, t]))
            ts_rows.append(row)
            label_rows.append([r.stay_id, t + 1, r.los_labels[t], r.mortality])
        flat_rows.append([r.stay_id, *r.static.tolist()])
        diag_rows.append([r.stay_id, *(int(v) for v in r.diagnoses)])

    ts_cols = ["stay_id", "hour"]
    for name in dataset.feature_names:
        ts_cols.extend((name, name + DECAY_SUFFIX))
    pd.DataFrame(ts_rows, columns=ts_cols).to_csv(directory / "timeseries.csv", index=False)
    pd.DataFrame(flat_rows, columns=["stay_id", *dataset.static_names]).to_csv(
        directory / "flat.csv", index=False
    )
    pd.DataFrame(diag_rows, columns=["stay_id", *dataset.diagnosis_names]).to_csv(
        directory / "diagnoses.csv", index=False
    )
    pd.DataFrame(
        label_rows, columns=["stay_id", "hour", "remaining_los_days", "mortality"]
    ).to_csv(directory / "labels.csv", index=False)

    meta = dict(dataset.meta)
    meta["feature_names"] = list(dataset.feature_names)
    meta["static_names"] = list(dataset.static_names)
    meta["diagnosis_names"] = list(dataset.diagnosis_names)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_dataset(
    directory: str | Path, horizon: int = DEFAULT_HORIZON_HOURS
) -> Dataset:
    """Load and validate a dataset directory.

    Every record is checked against the stay invariants; schema problems
    raise dataset errors naming the offending stay and column.
    """
    directory = Path(directory)
    for fname in ("timeseries.csv", "flat.csv", "diagnoses.csv", "labels.csv", "meta.json"):
        if not (directory / fname).exists():
            raise DatasetError(f"dataset directory {directory} is missing {fname}")
    meta = json.loads((directory / "meta.json").read_text())
    feature_names = list(meta["feature_names"])
    static_names = list(meta["static_names"])
    diagnosis_names = list(meta["diagnosis_names"])

    # round_trip parsing: the default CSV float parser can be off by one
    # ulp, which would break save->load bitwise equality and the clamp
    # checks below.
    ts = pd.read_csv(directory / "timeseries.csv", float_precision="round_trip")
    flat = pd.read_csv(directory / "flat.csv", float_precision="round_trip")
    diag = pd.read_csv(directory / "diagnoses.csv", float_precision="round_trip")
    labels = pd.read_csv(directory / "labels.csv", float_precision="round_trip")

    expected_ts = ["stay_id", "hour"]
    for name in feature_names:
        expected_ts.extend((name, name + DECAY_SUFFIX))
    if list(ts.columns) != expected_ts:
        raise DatasetError(
            "timeseries.csv columns do not match the canonical feature order in meta.json"
        )
    if list(flat.columns) != ["stay_id", *static_names]:
        raise DatasetError("flat.csv columns do not match static_names in meta.json")
    if list(diag.columns) != ["stay_id", *diagnosis_names]:
        raise DatasetError("diagnoses.csv columns do not match diagnosis_names in meta.json")
    if list(labels.columns) != ["stay_id", "hour", "remaining_los_days", "mortality"]:
        raise DatasetError("labels.csv has an unexpected column layout")
    for frame, fname in ((ts, "timeseries.csv"), (labels, "labels.csv")):
        if frame.isna().any().any():
            col = frame.columns[frame.isna().any().to_numpy()][0]
            raise DatasetError(f"{fname}: NaN in column {col!r}")

    for frame, fname in ((flat, "flat.csv"), (diag, "diagnoses.csv")):
        if not frame["stay_id"].is_unique:
            raise DatasetError(f"{fname}: duplicate stay_id rows")

    stay_patients = {int(k): int(v) for k, v in meta["stay_patients"].items()}
    value_cols = feature_names
    decay_cols = [n + DECAY_SUFFIX for n in feature_names]

    records = []
    flat_by_id = flat.set_index("stay_id")
    diag_by_id = diag.set_index("stay_id")
    labels_by_id = dict(tuple(labels.groupby("stay_id", sort=False)))
    for stay_id, group in ts.groupby("stay_id", sort=False):
        stay_id = int(stay_id)
        group = group.sort_values("hour")
        hours = group["hour"].to_numpy()
        if not np.array_equal(hours, np.arange(1, len(hours) + 1)):
            raise DatasetError(f"stay {stay_id}: hours are not contiguous from 1")
        if stay_id not in labels_by_id:
            raise DatasetError(f"stay {stay_id}: present in timeseries.csv but not labels.csv")
        lab = labels_by_id[stay_id].sort_values("hour")
        if len(lab) != len(hours):
            raise DatasetError(f"stay {stay_id}: label rows do not cover every hour")
        if stay_id not in flat_by_id.index:
            raise DatasetError(f"stay {stay_id}: missing from flat.csv")
        if stay_id not in diag_by_id.index:
            raise DatasetError(f"stay {stay_id}: missing from diagnoses.csv")
        if stay_id not in stay_patients:
            raise DatasetError(f"stay {stay_id}: missing from the stay-to-patient map")
        mortality = int(lab["mortality"].iloc[0])
        if not (lab["mortality"] == mortality).all():
            raise DatasetError(f"stay {stay_id}: mortality label changes over hours")
        record = StayRecord(
            stay_id=stay_id,
            patient_id=stay_patients[stay_id],
            values=group[value_cols].to_numpy().T.copy(),
            decay=group[decay_cols].to_numpy().T.copy(),
            static=flat_by_id.loc[stay_id].to_numpy(dtype=np.float64),
            diagnoses=diag_by_id.loc[stay_id].to_numpy(dtype=np.float64),
            los_labels=lab["remaining_los_days"].to_numpy(),
            mortality=mortality,
        )
        validate_record(record, horizon=horizon)
        records.append(record)
    if not records:
        raise DatasetError(f"dataset directory {directory} holds no stays")
    return Dataset(
        records=records,
        feature_names=feature_names,
        static_names=static_names,
        diagnosis_names=diagnosis_names,
        meta=meta,
    )
