"""Evaluation metrics over pooled per-hour predictions.

Length-of-stay metrics pool every eligible (stay, hour) point of a split;
mortality metrics use one point per stay, taken at hour 24 of stays that
last at least 24 hours.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

MAPE_DIVISOR_FLOOR_DAYS = 4.0 / 24.0

# Remaining-stay bins in days: [0,1), [1,2), ..., [7,8), [8,14), [14, inf).
KAPPA_BIN_EDGES = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 14.0])
N_BINS = len(KAPPA_BIN_EDGES)  # 10 bins; the last is open-ended


@dataclass
class PredictionSet:
    """Parallel arrays over pooled (stay, hour) prediction points."""

    yhat: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    mort_prob: np.ndarray
    mort_label: np.ndarray
    hour_index: np.ndarray
    stay_id: np.ndarray

    def __post_init__(self):
        arrays = [self.yhat, self.y, self.mask, self.mort_prob,
                  self.mort_label, self.hour_index, self.stay_id]
        lengths = {len(a) for a in arrays}
        if len(lengths) != 1:
            raise DimensionError(f"prediction arrays must be parallel, got lengths {lengths}")

    def masked(self):
        sel = self.mask.astype(bool)
        return self.yhat[sel], self.y[sel]

    def at_hour24(self):
        """Mortality points: hour 24 of stays lasting >= 24 hours."""
        sel = (self.hour_index == 24) & self.mask.astype(bool)
        return self.mort_prob[sel], self.mort_label[sel].astype(int)


@dataclass
class MetricsReport:
    mad: float | None = None
    mape: float | None = None
    mse: float | None = None
    msle: float | None = None
    r2: float | None = None
    kappa: float | None = None
    auroc: float | None = None
    auprc: float | None = None
    n_los_points: int = 0
    n_mortality_stays: int = 0
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "mad": self.mad,
            "mape": self.mape,
            "mse": self.mse,
            "msle": self.msle,
            "r2": self.r2,
            "kappa": self.kappa,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "n_los_points": self.n_los_points,
            "n_mortality_stays": self.n_mortality_stays,
            "flags": self.flags,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def mape(yhat: np.ndarray, y: np.ndarray) -> float:
    """Mean absolute percentage error with the 4-hour divisor floor."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    divisor = np.maximum(y, MAPE_DIVISOR_FLOOR_DAYS)
    return float(np.mean(np.abs(y - yhat) / divisor) * 100.0)


def day_bin(values: np.ndarray) -> np.ndarray:
    """Bin index (0..9) of a remaining-stay value in days."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.digitize(v, KAPPA_BIN_EDGES[1:], right=False), 0, N_BINS - 1)


def linear_weighted_kappa(yhat: np.ndarray, y: np.ndarray) -> float:
    """Cohen's kappa with linear weights 1 - |i-j|/(K-1) over the day bins.

    Computed in integer arithmetic (counts and 9x-scaled weights) so the
    degenerate cases are exact: any constant predictor gives 0.0 and a
    perfect predictor gives 1.0, with no float drift.
    """
    pred_bins = day_bin(yhat)
    true_bins = day_bin(y)
    n = len(pred_bins)
    counts = np.zeros((N_BINS, N_BINS), dtype=np.int64)
    np.add.at(counts, (pred_bins, true_bins), 1)
    idx = np.arange(N_BINS)
    weights9 = (N_BINS - 1) - np.abs(idx[:, None] - idx[None, :])  # 9 * w_ij
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    obs9n2 = int((weights9 * counts).sum()) * n  # 9 n^2 p_obs
    exp9n2 = int((weights9 * np.outer(row, col)).sum())  # 9 n^2 p_exp
    denom = 9 * n * n - exp9n2  # 9 n^2 (1 - p_exp)
    if denom == 0:
        return 0.0
    return (obs9n2 - exp9n2) / denom


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # mean of ranks i+1 .. j
        i = j
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum (Mann-Whitney) statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    ranks = _tie_averaged_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve by step integration over
    distinct score thresholds, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    n_pos = int(labels.sum())
    # Threshold boundaries: last index of each run of equal scores.
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.append(boundary, len(sorted_scores) - 1)
    tp = np.cumsum(sorted_labels)[cut].astype(np.float64)
    total = (cut + 1).astype(np.float64)
    precision = tp / total
    recall = tp / n_pos
    recall_steps = np.diff(np.concatenate([[0.0], recall]))
    return float((recall_steps * precision).sum())


def regression_metrics(pred_set: PredictionSet) -> tuple[dict, list[str]]:
    yhat, y = pred_set.masked()
    if len(y) == 0:
        raise DimensionError("regression metrics over an empty masked set")
    flags: list[str] = []
    values = {
        "mad": float(np.mean(np.abs(y - yhat))),
        "mape": mape(yhat, y),
        "mse": float(np.mean((y - yhat) ** 2)),
        "msle": float(np.mean((np.log(yhat) - np.log(y)) ** 2)),
        "kappa": linear_weighted_kappa(yhat, y),
    }
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        values["r2"] = None
        flags.append("r2_undefined_constant_targets")
    else:
        values["r2"] = 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot
    return values, flags


def classification_metrics(pred_set: PredictionSet) -> tuple[dict, list[str]]:
    probs, labels = pred_set.at_hour24()
    flags: list[str] = []
    values: dict = {"auroc": None, "auprc": None, "n": int(len(labels))}
    if len(labels) == 0:
        flags.append("mortality_no_eligible_stays")
        return values, flags
    if len(np.unique(labels)) < 2:
        flags.append("mortality_single_class")
        return values, flags
    values["auroc"] = auroc(probs, labels)
    values["auprc"] = auprc(probs, labels)
    return values, flags


def metrics_report(pred_set: PredictionSet) -> MetricsReport:
    reg, reg_flags = regression_metrics(pred_set)
    cls, cls_flags = classification_metrics(pred_set)
    return MetricsReport(
        mad=reg["mad"],
        mape=reg["mape"],
        mse=reg["mse"],
        msle=reg["msle"],
        r2=reg["r2"],
        kappa=reg["kappa"],
        auroc=cls["auroc"],
        auprc=cls["auprc"],
        n_los_points=int(pred_set.mask.astype(bool).sum()),
        n_mortality_stays=cls["n"],
        flags=reg_flags + cls_flags,
    )
