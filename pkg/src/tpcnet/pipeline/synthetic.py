"""Synthetic ICU cohort generator.

Emits raw event logs in the same shape a real extraction would produce
(events.csv, stays.csv, diagnoses_raw.csv), so the entire preprocessing
pipeline runs end to end without credentialed data.

Each stay draws a latent severity.  Total stay length is log-normal in
severity (positively skewed), mortality probability is increasing in it,
and three "wired" features — heart_rate, mean_arterial_pressure and
lactate — track severity closely while every other feature is
severity-independent noise.  Remaining length of stay is therefore a
smooth, learnable function of the wired features.  Vital-like features
are sampled roughly hourly (AR(1) around the stay mean); lab-like
features appear only every 6-24 hours, exercising forward fill and
decay; occasional pre-admission events exercise the hour-0 seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ConfigError

VITAL_FEATURES = (
    "heart_rate",
    "mean_arterial_pressure",
    "respiratory_rate",
    "oxygen_saturation",
    "temperature",
    "systolic_bp",
    "diastolic_bp",
    "motor_response",
)
LAB_FEATURES = (
    "lactate",
    "creatinine",
    "sodium",
    "potassium",
    "white_cell_count",
    "hemoglobin",
    "platelets",
    "bilirubin",
    "urea_nitrogen",
    "glucose",
)
# Features whose levels are driven by the latent severity that also sets
# stay length; attribution analyses should surface exactly these.
WIRED_FEATURES = ("heart_rate", "mean_arterial_pressure", "lactate")

_BASE_MEANS = {
    "heart_rate": 82.0,
    "mean_arterial_pressure": 88.0,
    "respiratory_rate": 17.0,
    "oxygen_saturation": 96.5,
    "temperature": 36.9,
    "systolic_bp": 121.0,
    "diastolic_bp": 72.0,
    "motor_response": 5.6,
    "lactate": 1.6,
    "creatinine": 1.1,
    "sodium": 139.0,
    "potassium": 4.1,
    "white_cell_count": 9.0,
    "hemoglobin": 11.5,
    "platelets": 240.0,
    "bilirubin": 0.9,
    "urea_nitrogen": 18.0,
    "glucose": 132.0,
}
_NOISE_SCALES = {
    "heart_rate": 6.0,
    "mean_arterial_pressure": 5.5,
    "respiratory_rate": 2.2,
    "oxygen_saturation": 1.2,
    "temperature": 0.35,
    "systolic_bp": 8.0,
    "diastolic_bp": 6.0,
    "motor_response": 0.5,
    "lactate": 0.25,
    "creatinine": 0.18,
    "sodium": 2.4,
    "potassium": 0.3,
    "white_cell_count": 1.8,
    "hemoglobin": 0.9,
    "platelets": 28.0,
    "bilirubin": 0.22,
    "urea_nitrogen": 3.5,
    "glucose": 22.0,
}
# Severity loading per wired feature (units of the feature per unit of
# latent severity).
_SEVERITY_LOADING = {
    "heart_rate": 24.0,
    "mean_arterial_pressure": -13.0,
    "lactate": 1.3,
}

_DIAGNOSIS_POOL = (
    "cardiovascular|shock|septic",
    "cardiovascular|shock|cardiogenic",
    "cardiovascular|arrhythmia|afib",
    "cardiovascular|infarction",
    "respiratory|failure|hypoxemic",
    "respiratory|failure|hypercapnic",
    "respiratory|pneumonia",
    "renal|acute_injury",
    "renal|chronic_disease",
    "neurologic|stroke",
    "neurologic|seizure",
    "gastrointestinal|bleeding",
    "endocrine|diabetic_ketoacidosis",
    "trauma|multisystem",
)
# How strongly each diagnosis root tilts toward severe stays.
_DIAGNOSIS_SEVERITY_TILT = {
    "cardiovascular": 0.8,
    "respiratory": 0.6,
    "renal": 0.3,
    "neurologic": 0.2,
    "gastrointestinal": 0.1,
    "endocrine": 0.0,
    "trauma": 0.5,
}

UNIT_TYPES = ("cardiac", "medical", "surgical")


@dataclass
class GenConfig:
    """Knobs of the synthetic cohort (all defaults documented here)."""

    n_patients: int = 100
    seed: int = 0
    second_stay_probability: float = 0.10
    los_base_log_hours: float = math.log(48.0)  # median stay ~2 days
    los_severity_coef: float = 0.8
    los_noise_sigma: float = 0.25
    max_stay_hours: int = 1000
    ar_coefficient: float = 0.8
    vital_miss_probability: float = 0.04  # chance an hourly vital is skipped
    never_observed_probability: float = 0.03  # feature absent for a whole stay
    pre_admission_probability: float = 0.25
    mortality_intercept: float = -2.1
    mortality_severity_coef: float = 1.5

    def to_dict(self) -> dict:
        return asdict(self)


def _stay_severity(rng: np.random.Generator, patient_base: float) -> float:
    return 0.6 * patient_base + 0.8 * rng.normal()


def _stay_length_hours(rng: np.random.Generator, cfg: GenConfig, severity: float) -> int:
    log_hours = (
        cfg.los_base_log_hours
        + cfg.los_severity_coef * severity
        + cfg.los_noise_sigma * rng.normal()
    )
    return int(np.clip(round(math.exp(log_hours)), 5, cfg.max_stay_hours))


def _feature_mean(name: str, severity: float) -> float:
    return _BASE_MEANS[name] + _SEVERITY_LOADING.get(name, 0.0) * severity


def _emit_series(
    rng: np.random.Generator,
    cfg: GenConfig,
    events: list,
    stay_id: int,
    name: str,
    severity: float,
    length: int,
    hourly: bool,
) -> None:
    if rng.random() < cfg.never_observed_probability:
        return
    mean = _feature_mean(name, severity)
    scale = _NOISE_SCALES[name]
    level = mean + scale * rng.normal()
    if rng.random() < cfg.pre_admission_probability:
        offset = -float(rng.integers(0, 1441))
        events.append((stay_id, name, offset, round(level, 3)))
    if hourly:
        sample_hours = [
            t for t in range(1, length + 1) if rng.random() >= cfg.vital_miss_probability
        ]
    else:
        sample_hours, t = [], 0
        while True:
            t += int(rng.integers(6, 25))
            if t > length:
                break
            sample_hours.append(t)
    for t in sample_hours:
        level = mean + cfg.ar_coefficient * (level - mean) + scale * rng.normal()
        offset = float(60 * (t - 1) + rng.integers(1, 61))
        events.append((stay_id, name, offset, round(level, 3)))


def _emit_diagnoses(
    rng: np.random.Generator, diag_rows: list, stay_id: int, severity: float
) -> None:
    for path in _DIAGNOSIS_POOL:
        root = path.split("|")[0]
        tilt = _DIAGNOSIS_SEVERITY_TILT[root]
        p = 1.0 / (1.0 + math.exp(-(-1.9 + tilt * severity)))
        if rng.random() < p:
            # Mostly charted early; occasionally after hour 5 so the
            # "recorded before hour 5" rule is exercised.
            if rng.random() < 0.85:
                offset = float(rng.integers(-600, 300))
            else:
                offset = float(rng.integers(400, 900))
            diag_rows.append((stay_id, path, offset))


def generate_synthetic_cohort(config: GenConfig, out_dir: str | Path) -> Path:
    """Write events.csv, stays.csv, diagnoses_raw.csv and a generator
    manifest into ``out_dir``.  Deterministic in ``config.seed``."""
    if config.n_patients < 1:
        raise ConfigError(f"n_patients must be >= 1, got {config.n_patients}")
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    events: list = []
    stay_rows: list = []
    diag_rows: list = []
    stay_id = 0
    for patient_id in range(1, config.n_patients + 1):
        patient_base = rng.normal()
        age = int(np.clip(round(62.0 + 9.0 * patient_base + 14.0 * rng.normal()), 18, 95))
        female = int(rng.random() < 0.5)
        n_stays = 1 + int(rng.random() < config.second_stay_probability)
        for _ in range(n_stays):
            stay_id += 1
            severity = _stay_severity(rng, patient_base)
            length = _stay_length_hours(rng, config, severity)
            admission_hour = int(rng.integers(0, 24))
            elective = int(rng.random() < max(0.05, 0.35 - 0.2 * severity))
            unit_type = UNIT_TYPES[int(rng.integers(0, len(UNIT_TYPES)))]
            p_death = 1.0 / (
                1.0
                + math.exp(
                    -(config.mortality_intercept + config.mortality_severity_coef * severity)
                )
            )
            mortality = int(rng.random() < p_death)
            stay_rows.append(
                (
                    stay_id,
                    patient_id,
                    length,
                    admission_hour,
                    mortality,
                    age,
                    female,
                    elective,
                    unit_type,
                )
            )
            for name in VITAL_FEATURES:
                _emit_series(rng, config, events, stay_id, name, severity, length, hourly=True)
            for name in LAB_FEATURES:
                _emit_series(rng, config, events, stay_id, name, severity, length, hourly=False)
            _emit_diagnoses(rng, diag_rows, stay_id, severity)

    pd.DataFrame(
        events, columns=["stay_id", "feature_name", "offset_minutes", "value"]
    ).to_csv(out_dir / "events.csv", index=False)
    pd.DataFrame(
        stay_rows,
        columns=[
            "stay_id",
            "patient_id",
            "length_hours",
            "admission_hour",
            "mortality",
            "age",
            "female",
            "elective",
            "unit_type",
        ],
    ).to_csv(out_dir / "stays.csv", index=False)
    pd.DataFrame(diag_rows, columns=["stay_id", "code_path", "offset_minutes"]).to_csv(
        out_dir / "diagnoses_raw.csv", index=False
    )
    (out_dir / "generator.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True)
    )
    return out_dir
