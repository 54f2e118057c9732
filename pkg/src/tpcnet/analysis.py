"""Post-hoc analyses: attribution, reliability grid, occupancy simulation.

Everything here consumes a trained model (or its PredictionSet) and
emits plain CSV; no plotting.  All randomness is seeded, and simulation
runs use per-run child seeds so a parallel execution would reproduce
the single-threaded result run for run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, backward, take_slice, tensor_sum
from .errors import DatasetError, DimensionError, DomainError
from .metrics import (
    KAPPA_BIN_EDGES,
    N_BINS,
    MetricsReport,
    PredictionSet,
    day_bin,
    mape,
    metrics_report,
)
from .model import TpcModel
from .pipeline.records import Dataset, StayRecord

ATTRIBUTION_HOUR = 24
DEFAULT_IG_STEPS = 256
SIMULATION_RUNS = 500
SIMULATION_COHORT = 16
SIMULATION_START_HOUR = 5
MAX_DAY_BIN = 14  # the input horizon is 14 days, so stay-days run 1..14


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    """Full-precision float formatting so CSVs round-trip bitwise."""
    return repr(float(value))


# ---------------------------------------------------------------------------
# Integrated gradients
# ---------------------------------------------------------------------------


def integrated_gradients(
    model,
    stay: StayRecord,
    baseline_values: np.ndarray,
    steps: int = DEFAULT_IG_STEPS,
    hour: int = ATTRIBUTION_HOUR,
) -> np.ndarray:
    """Path-integral attribution of the hour-``hour`` stay-length prediction.

    Interpolates the time-series inputs (values and decay channels
    jointly) from a baseline to the actual stay along a straight line,
    averages the input gradients at the ``steps`` midpoints, and scales
    by the input-baseline gap.  Static and diagnosis inputs are held at
    the stay's actual values, so attribution is over time series only.

    ``baseline_values`` gives the per-feature baseline level (one value
    per feature, typically the training-set mean); the baseline decay
    channel is 1 everywhere, i.e. a freshly-observed baseline.  Returns
    one attribution per (feature, hour-column), already summed over the
    value and decay channels, so the completeness identity
    ``sum(phi) == prediction(x) - prediction(baseline)`` holds up to
    quadrature error.
    """
    if stay.n_hours < hour:
        raise DomainError(
            f"stay {stay.stay_id} has {stay.n_hours} hours; "
            f"attribution needs at least {hour}"
        )
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    x_values = stay.values[:, :hour]
    x_decay = stay.decay[:, :hour]
    b_values = np.broadcast_to(
        np.asarray(baseline_values, dtype=np.float64)[:, None], x_values.shape
    )
    b_decay = np.ones_like(x_decay)

    # Midpoint rule: stack all interpolation points as one batch.  In
    # eval mode the network couples batch items through nothing, so one
    # forward of [steps, F, hour] equals `steps` separate forwards.
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path_values = b_values + alphas[:, None, None] * (x_values - b_values)
    path_decay = b_decay + alphas[:, None, None] * (x_decay - b_decay)
    v = Tensor(path_values, requires_grad=True, name="ig_values")
    d = Tensor(path_decay, requires_grad=True, name="ig_decay")
    static = np.broadcast_to(stay.static, (steps, stay.static.shape[0]))
    diagnoses = (
        np.broadcast_to(stay.diagnoses, (steps, stay.diagnoses.shape[0]))
        if stay.diagnoses.size
        else None
    )

    with Graph() as graph:
        out = model.forward(v, d, static, diagnoses=diagnoses, training=False)
        target = tensor_sum(take_slice(out.los, (slice(None), hour - 1)))
        backward(graph, target, [v, d])

    mean_grad_v = v.grad.mean(axis=0)
    mean_grad_d = d.grad.mean(axis=0)
    return (x_values - b_values) * mean_grad_v + (x_decay - b_decay) * mean_grad_d


def prediction_at_hour(model, stay: StayRecord, hour: int = ATTRIBUTION_HOUR,
                       values=None, decay=None) -> float:
    """Eval-mode stay-length prediction at one hour, in days.

    ``values``/``decay`` override the stay's time series (used to
    evaluate the attribution baseline point).
    """
    v = stay.values[:, :hour] if values is None else values
    d = stay.decay[:, :hour] if decay is None else decay
    diagnoses = stay.diagnoses[None, :] if stay.diagnoses.size else None
    with Graph():
        out = model.forward(
            v[None, :, :], d[None, :, :], stay.static[None, :],
            diagnoses=diagnoses, training=False,
        )
        return float(out.los.data[0, hour - 1])


def completeness_error(
    model,
    stay: StayRecord,
    baseline_values: np.ndarray,
    steps: int = DEFAULT_IG_STEPS,
    hour: int = ATTRIBUTION_HOUR,
) -> tuple[float, float]:
    """(absolute, relative) gap between summed attributions and the
    prediction difference they should total."""
    phi = integrated_gradients(model, stay, baseline_values, steps=steps, hour=hour)
    pred_x = prediction_at_hour(model, stay, hour=hour)
    b_values = np.broadcast_to(
        np.asarray(baseline_values, dtype=np.float64)[:, None],
        stay.values[:, :hour].shape,
    )
    pred_b = prediction_at_hour(
        model, stay, hour=hour,
        values=b_values, decay=np.ones_like(b_values),
    )
    gap = pred_x - pred_b
    abs_err = abs(float(phi.sum()) - gap)
    rel_err = abs_err / abs(gap) if gap != 0.0 else np.inf
    return abs_err, rel_err


@dataclass
class AttributionResult:
    """Per-feature importance: mean |attribution| over hours then stays."""

    feature_names: list[str]
    mean_abs: np.ndarray  # [F]
    rank: np.ndarray  # [F] int, 1 = largest mean_abs
    n_stays: int = 0

    def top(self, k: int) -> list[str]:
        order = np.argsort(self.rank)
        return [self.feature_names[i] for i in order[:k]]


def aggregate_attributions(
    per_stay: list[np.ndarray], feature_names: list[str]
) -> AttributionResult:
    """|phi| -> mean over hours -> mean over stays -> descending rank.

    The over-stays mean uses exactly-rounded summation, so the result
    is bitwise independent of the order stays are supplied in.
    """
    if not per_stay:
        raise DatasetError("attribution aggregation needs at least one stay")
    per_stay_means = np.stack([np.abs(phi).mean(axis=1) for phi in per_stay])
    mean_abs = np.array(
        [math.fsum(per_stay_means[:, j]) for j in range(per_stay_means.shape[1])]
    ) / len(per_stay)
    if len(feature_names) != mean_abs.shape[0]:
        raise DatasetError(
            f"{len(feature_names)} feature names for {mean_abs.shape[0]} attribution rows"
        )
    if not np.all(np.isfinite(mean_abs)):
        raise DomainError("non-finite attributions")
    order = np.argsort(-mean_abs, kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(1, len(order) + 1)
    return AttributionResult(
        feature_names=list(feature_names),
        mean_abs=mean_abs,
        rank=rank,
        n_stays=len(per_stay),
    )


def attribute_cohort(
    model: TpcModel,
    dataset: Dataset,
    split: str = "test",
    steps: int = DEFAULT_IG_STEPS,
    max_stays: int | None = None,
    hour: int = ATTRIBUTION_HOUR,
) -> AttributionResult:
    """Attribution over every split stay long enough to reach ``hour``."""
    baseline = np.asarray(dataset.meta["feature_means"], dtype=np.float64)
    per_stay = []
    for record in dataset.split_records(split):
        if record.n_hours < hour:
            continue  # too short to have an hour-24 prediction
        per_stay.append(
            integrated_gradients(model, record, baseline, steps=steps, hour=hour)
        )
        if max_stays is not None and len(per_stay) >= max_stays:
            break
    if not per_stay:
        raise DatasetError(f"no stay in split {split!r} reaches hour {hour}")
    return aggregate_attributions(per_stay, dataset.feature_names)


def write_attributions_csv(result: AttributionResult, path) -> None:
    order = np.argsort(result.rank)
    rows = [
        (result.feature_names[i], _fmt(result.mean_abs[i]), int(result.rank[i]))
        for i in order
    ]
    _write_csv(path, ["feature", "mean_abs_attribution", "rank"], rows)


# ---------------------------------------------------------------------------
# Reliability grid
# ---------------------------------------------------------------------------


@dataclass
class ReliabilityCell:
    day_bin: int  # 1..14: admission day of the prediction point
    los_bin: int  # 0..9: predicted-remaining-stay bin (kappa bin edges)
    mape: float | None  # None when the cell is empty
    n: int


def los_bin_label(index: int) -> str:
    """Human-readable bin span, e.g. '2-3' or '14+'."""
    if index == N_BINS - 1:
        return f"{KAPPA_BIN_EDGES[-1]:g}+"
    return f"{KAPPA_BIN_EDGES[index]:g}-{KAPPA_BIN_EDGES[index + 1]:g}"


def reliability_grid(pred_set: PredictionSet) -> list[ReliabilityCell]:
    """Accuracy broken down by stay-day and by predicted remaining stay.

    Every masked point lands in exactly one (day, bin) cell: the day is
    which 24-hour block of the stay the prediction was made in, the bin
    is where the *predicted* remaining stay falls among the kappa bin
    edges.  Each populated cell reports the floor-modified MAPE of its
    points; empty cells carry n=0.
    """
    sel = pred_set.mask.astype(bool)
    yhat = pred_set.yhat[sel]
    y = pred_set.y[sel]
    days = np.ceil(pred_set.hour_index[sel] / 24).astype(np.int64)
    bins = day_bin(yhat)
    cells = []
    for d in range(1, MAX_DAY_BIN + 1):
        for b in range(N_BINS):
            hit = (days == d) & (bins == b)
            n = int(hit.sum())
            cell_mape = mape(yhat[hit], y[hit]) if n else None
            cells.append(ReliabilityCell(day_bin=d, los_bin=b, mape=cell_mape, n=n))
    return cells


def write_reliability_csv(cells: list[ReliabilityCell], path) -> None:
    rows = [
        (c.day_bin, los_bin_label(c.los_bin), "" if c.mape is None else _fmt(c.mape), c.n)
        for c in cells
    ]
    _write_csv(path, ["day_bin", "los_bin", "mape", "n"], rows)


# ---------------------------------------------------------------------------
# Occupancy simulation
# ---------------------------------------------------------------------------


@dataclass
class OccupancyCurve:
    """Remaining-patient counts per elapsed hour, across simulation runs."""

    hours: np.ndarray  # [H+1] 0..H
    true_counts: np.ndarray  # [runs, H+1]
    pred_counts: np.ndarray  # [runs, H+1]
    samples: np.ndarray  # [runs, cohort] indices into the stay arrays

    @property
    def error(self) -> np.ndarray:
        return self.true_counts - self.pred_counts

    def summary(self) -> dict[str, np.ndarray]:
        return {
            "hour": self.hours,
            "true_mean": self.true_counts.mean(axis=0),
            "true_std": self.true_counts.std(axis=0),
            "pred_mean": self.pred_counts.mean(axis=0),
            "pred_std": self.pred_counts.std(axis=0),
            "error_mean": self.error.mean(axis=0),
            "error_std": self.error.std(axis=0),
        }


def _occupancy(remaining_hours: np.ndarray, hours: np.ndarray) -> np.ndarray:
    """#{stays with remaining time strictly above h} for each h."""
    return (remaining_hours[None, :] > hours[:, None]).sum(axis=1)


def simulate_icu(
    true_days: np.ndarray,
    pred_days: np.ndarray,
    n_runs: int = SIMULATION_RUNS,
    cohort_size: int = SIMULATION_COHORT,
    seed: int = 0,
) -> OccupancyCurve:
    """Ward-emptying simulation from a frozen prediction time.

    Each run samples ``cohort_size`` stays without replacement and
    counts, for every elapsed hour, how many are still present — once
    by their true remaining time, once by the predicted one.  Inputs
    are remaining stay lengths in days at the prediction time.
    """
    true_days = np.asarray(true_days, dtype=np.float64)
    pred_days = np.asarray(pred_days, dtype=np.float64)
    if true_days.shape != pred_days.shape:
        raise DimensionError(
            f"true and predicted arrays must be parallel, "
            f"got {true_days.shape} vs {pred_days.shape}"
        )
    n = len(true_days)
    if n < cohort_size:
        raise DatasetError(
            f"simulation needs at least {cohort_size} stays, got {n}"
        )
    horizon = int(np.ceil(24.0 * max(true_days.max(), pred_days.max())))
    hours = np.arange(horizon + 1)
    seeds = np.random.SeedSequence(seed).spawn(n_runs)
    true_counts = np.empty((n_runs, horizon + 1), dtype=np.int64)
    pred_counts = np.empty((n_runs, horizon + 1), dtype=np.int64)
    samples = np.empty((n_runs, cohort_size), dtype=np.int64)
    for r in range(n_runs):
        rng = np.random.default_rng(seeds[r])
        pick = rng.choice(n, size=cohort_size, replace=False)
        samples[r] = pick
        true_counts[r] = _occupancy(24.0 * true_days[pick], hours)
        pred_counts[r] = _occupancy(24.0 * pred_days[pick], hours)
    return OccupancyCurve(
        hours=hours, true_counts=true_counts, pred_counts=pred_counts, samples=samples
    )


def predictions_at_hour(pred_set: PredictionSet, hour: int = SIMULATION_START_HOUR):
    """Per-stay (ids, true, predicted) remaining days at one stay hour."""
    sel = (pred_set.hour_index == hour) & pred_set.mask.astype(bool)
    return pred_set.stay_id[sel], pred_set.y[sel], pred_set.yhat[sel]


def write_simulation_csv(curve: OccupancyCurve, path) -> None:
    s = curve.summary()
    rows = zip(
        s["hour"],
        (_fmt(v) for v in s["true_mean"]),
        (_fmt(v) for v in s["true_std"]),
        (_fmt(v) for v in s["pred_mean"]),
        (_fmt(v) for v in s["pred_std"]),
        (_fmt(v) for v in s["error_mean"]),
        (_fmt(v) for v in s["error_std"]),
    )
    _write_csv(
        path,
        ["hour", "true_mean", "true_std", "pred_mean", "pred_std",
         "error_mean", "error_std"],
        rows,
    )


# ---------------------------------------------------------------------------
# Constant baselines
# ---------------------------------------------------------------------------


@dataclass
class ConstantPredictor:
    """Predicts one remaining-stay value everywhere; the no-skill floor."""

    kind: str  # mean | median
    value: float

    def __call__(self, *_args, **_kwargs) -> float:
        return self.value


def train_label_points(dataset: Dataset, start_hour: int | None = None) -> np.ndarray:
    """All remaining-stay label values a model would train on."""
    if start_hour is None:
        start_hour = int(dataset.meta.get("prediction_start_hour", 5))
    chunks = [
        r.los_labels[start_hour - 1 :] for r in dataset.split_records("train")
    ]
    if not chunks:
        raise DatasetError("dataset has no training stays")
    return np.concatenate(chunks)


def baseline_predict(kind: str, train_labels: np.ndarray) -> ConstantPredictor:
    """Fit the constant mean/median predictor on training label points."""
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.size == 0:
        raise DatasetError("baseline needs at least one training label")
    if kind == "mean":
        value = float(np.mean(labels))
    elif kind == "median":
        value = float(np.median(labels))
    else:
        raise DomainError(f"baseline kind must be 'mean' or 'median', got {kind!r}")
    return ConstantPredictor(kind=kind, value=value)


def baseline_prediction_set(
    dataset: Dataset, predictor: ConstantPredictor, split: str = "test",
    start_hour: int | None = None,
) -> PredictionSet:
    """The constant predictor's pooled predictions over a split."""
    if start_hour is None:
        start_hour = int(dataset.meta.get("prediction_start_hour", 5))
    records = dataset.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} contains no stays")
    yhat, y, mask, mort_l, hours, stays = [], [], [], [], [], []
    for r in records:
        t = r.n_hours
        yhat.append(np.full(t, predictor.value))
        y.append(r.los_labels)
        hour_index = np.arange(1, t + 1)
        mask.append(hour_index >= start_hour)
        hours.append(hour_index)
        mort_l.append(np.full(t, r.mortality))
        stays.append(np.full(t, r.stay_id))
    n = sum(len(c) for c in yhat)
    return PredictionSet(
        yhat=np.concatenate(yhat),
        y=np.concatenate(y),
        mask=np.concatenate(mask),
        mort_prob=np.full(n, 0.5),
        mort_label=np.concatenate(mort_l),
        hour_index=np.concatenate(hours),
        stay_id=np.concatenate(stays),
    )


def evaluate_baseline(
    dataset: Dataset, kind: str, split: str = "test"
) -> tuple[ConstantPredictor, PredictionSet, MetricsReport]:
    """Fit on train labels, score on a split; mortality metrics blanked."""
    predictor = baseline_predict(kind, train_label_points(dataset))
    pred_set = baseline_prediction_set(dataset, predictor, split)
    report = metrics_report(pred_set)
    report.auroc = None
    report.auprc = None
    report.n_mortality_stays = 0
    report.flags = [f for f in report.flags if not f.startswith("mortality")]
    report.flags.append("constant_baseline")
    return predictor, pred_set, report
