"""Mini-batch Adam training loop, evaluation, and batch assembly.

The loop is deterministic for a fixed seed when ``threads == 1``: stay
order, parameter initialization, and dropout all draw from one seeded
generator, and every array op runs in float64.  With ``threads > 1``
each batch is split into shards whose forward passes run concurrently;
gradients are reduced in shard order, but batch-norm running statistics
are updated from per-shard batch statistics in completion order, so the
threaded mode is deterministic only up to that update order and is not
bitwise-comparable to a single-threaded run.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward
from .checkpoint import feature_signature, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, DatasetError, TrainingError
from .losses import mortality_loss, mse_loss, msle_loss, multitask_loss
from .metrics import MetricsReport, PredictionSet, metrics_report
from .model import TpcModel
from .pipeline.records import Dataset, StayRecord

log = logging.getLogger(__name__)

_LOSS_FNS = {"msle": msle_loss, "mse": mse_loss}


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """A zero-padded stack of stays.

    ``data_mask`` is False exactly on padded cells (it governs which
    cells feed batch-norm statistics); ``loss_mask`` additionally
    excludes the warm-up hours before the first prediction hour, and is
    what losses and metrics average over.
    """

    stay_ids: np.ndarray  # [B] int
    values: np.ndarray  # [B, F, T]
    decay: np.ndarray  # [B, F, T]
    static: np.ndarray  # [B, S]
    diagnoses: np.ndarray | None  # [B, D]
    los_labels: np.ndarray  # [B, T]
    mortality: np.ndarray  # [B] int
    data_mask: np.ndarray  # [B, T] bool
    loss_mask: np.ndarray  # [B, T] bool
    hour_index: np.ndarray  # [T] int, 1-based hour of each column

    @property
    def n_stays(self) -> int:
        return len(self.stay_ids)

    @property
    def n_hours(self) -> int:
        return self.values.shape[2]


def make_batch(records: list[StayRecord], start_hour: int = 5) -> Batch:
    """Stack stay records into one batch, zero-padding to the longest stay."""
    if not records:
        raise DatasetError("cannot build a batch from zero stays")
    n = len(records)
    n_feat = records[0].values.shape[0]
    n_hours = max(r.n_hours for r in records)
    values = np.zeros((n, n_feat, n_hours))
    decay = np.zeros((n, n_feat, n_hours))
    los = np.ones((n, n_hours))  # padded labels pinned to 1: in-domain for log
    data_mask = np.zeros((n, n_hours), dtype=bool)
    for i, rec in enumerate(records):
        t = rec.n_hours
        values[i, :, :t] = rec.values
        decay[i, :, :t] = rec.decay
        los[i, :t] = rec.los_labels
        data_mask[i, :t] = True
    hour_index = np.arange(1, n_hours + 1)
    loss_mask = data_mask & (hour_index >= start_hour)
    static = np.stack([r.static for r in records])
    n_diag = records[0].diagnoses.shape[0]
    diagnoses = np.stack([r.diagnoses for r in records]) if n_diag else None
    return Batch(
        stay_ids=np.array([r.stay_id for r in records]),
        values=values,
        decay=decay,
        static=static,
        diagnoses=diagnoses,
        los_labels=los,
        mortality=np.array([r.mortality for r in records]),
        data_mask=data_mask,
        loss_mask=loss_mask,
        hour_index=hour_index,
    )


def batch_stays(
    records: list[StayRecord],
    batch_size: int,
    rng: np.random.Generator | None = None,
    start_hour: int = 5,
) -> list[Batch]:
    """Split stays into batches, shuffling when a generator is given.

    Every stay appears in exactly one batch; the final batch may be
    short.  Without a generator the input order is kept (evaluation).
    """
    order = list(range(len(records)))
    if rng is not None:
        order = list(rng.permutation(len(records)))
    batches = []
    for lo in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[lo : lo + batch_size]]
        batches.append(make_batch(chunk, start_hour=start_hour))
    return batches


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    ``step()`` reads each parameter's ``.grad`` as filled in by the last
    backward pass and updates ``.data`` in place.  Non-finite gradients
    abort the run with a diagnosis of which parameter overflowed rather
    than silently corrupting the moment estimates.
    """

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params}
        self._v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self) -> None:
        for name, tensor in self.params:
            if tensor.grad is None:
                raise TrainingError(f"parameter {name!r} has no gradient; run backward() first")
            if not np.all(np.isfinite(tensor.grad)):
                bad = int(np.sum(~np.isfinite(tensor.grad)))
                raise TrainingError(
                    f"non-finite gradient for parameter {name!r} "
                    f"({bad}/{tensor.grad.size} cells) at step {self.step_count + 1}; "
                    "aborting before the update corrupts optimizer state"
                )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, tensor in self.params:
            g = tensor.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            tensor.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(
    params: list[tuple[str, Tensor]],
    state: Adam | None,
    learning_rate: float,
) -> Adam:
    """Apply one Adam update, creating the state on first use."""
    if state is None:
        state = Adam(params, learning_rate)
    state.step()
    return state


# ---------------------------------------------------------------------------
# Loss evaluation
# ---------------------------------------------------------------------------


def batch_loss(model: TpcModel, batch: Batch, loss_name: str, *,
               training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Forward one batch and return the scalar training objective.

    The objective averages over every masked prediction point in the
    batch (not per-stay first), so long stays weigh proportionally to
    their number of predicted hours; for multitask models the mortality
    term is added with the configured weight.
    """
    out = model.forward(
        batch.values,
        batch.decay,
        batch.static,
        diagnoses=batch.diagnoses,
        data_mask=batch.data_mask,
        training=training,
        rng=rng,
    )
    loss_fn = _LOSS_FNS[loss_name]
    loss = loss_fn(out.los, batch.los_labels, batch.loss_mask)
    if model.config.multitask:
        mort = mortality_loss(out.mortality, batch.mortality, batch.loss_mask)
        loss = multitask_loss(loss, mort, model.config.mortality_weight)
    return loss


def _masked_objective_value(model: TpcModel, batch: Batch, loss_name: str) -> tuple[float, int]:
    """Eval-mode objective for one batch plus its masked-point count."""
    with Graph():
        loss = batch_loss(model, batch, loss_name, training=False)
        value = float(loss.data)
    return value, int(batch.loss_mask.sum())


def dataset_loss(model: TpcModel, records: list[StayRecord], loss_name: str,
                 batch_size: int, start_hour: int) -> float:
    """Objective over a split in eval mode, averaged over masked points."""
    total = 0.0
    count = 0
    for batch in batch_stays(records, batch_size, rng=None, start_hour=start_hour):
        value, n = _masked_objective_value(model, batch, loss_name)
        total += value * n
        count += n
    if count == 0:
        raise DatasetError("no masked prediction points in this split")
    return total / count


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: TpcModel
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    checkpoint_path: str | None
    diverged: bool = False
    feature_names: list[str] = field(default_factory=list)


def _select_train_records(records: list[StayRecord], fraction: float,
                          rng: np.random.Generator) -> list[StayRecord]:
    """Seeded subsample of exactly floor(fraction * n) stays."""
    if fraction >= 1.0:
        return list(records)
    keep = int(math.floor(fraction * len(records)))
    if keep < 1:
        raise DatasetError(
            f"train_fraction={fraction} keeps zero of {len(records)} training stays"
        )
    order = rng.permutation(len(records))[:keep]
    return [records[i] for i in sorted(order)]


def _restrict_for_subset(dataset: Dataset, subset: str) -> Dataset:
    """Apply the feature_subset knob as a dataset-level row restriction."""
    if subset == "all":
        return dataset
    kinds = dataset.meta.get("feature_kinds")
    if not kinds:
        raise DatasetError(
            "feature_subset requires feature_kinds in the dataset metadata"
        )
    if subset == "labs":
        keep = [name for name in dataset.feature_names if kinds.get(name) == "lab"]
    else:  # "other": everything that is not a lab (vitals + clock rows)
        keep = [name for name in dataset.feature_names if kinds.get(name) != "lab"]
    if not keep:
        raise DatasetError(f"feature_subset={subset!r} keeps zero feature rows")
    return dataset.restrict_features(keep)


def _snapshot_model(model: TpcModel) -> dict:
    state = {name: t.data.copy() for name, t in model.parameters()}
    norms = {
        name: {k: arr.copy() for k, arr in bn.state_arrays().items()}
        for name, bn in model.norms()
    }
    return {"params": state, "norms": norms}


def _restore_model(model: TpcModel, snap: dict) -> None:
    for name, t in model.parameters():
        t.data = snap["params"][name].copy()
    for name, bn in model.norms():
        s = snap["norms"][name]
        bn.load_state(s["running_mean"], s["running_var"], s["updates"])


def _train_batch_single(model: TpcModel, batch: Batch, loss_name: str,
                        rng: np.random.Generator) -> float:
    params = model.parameters()
    with Graph() as graph:
        loss = batch_loss(model, batch, loss_name, training=True, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite training loss {value}")
        backward(graph, loss, [t for _, t in params])
    return value


def _train_batch_sharded(model: TpcModel, batch: Batch, loss_name: str,
                         rng: np.random.Generator, pool: ThreadPoolExecutor,
                         n_shards: int) -> float:
    """Data-parallel batch step: shard forward passes run in the pool.

    Each shard gets its own dropout stream (spawned deterministically
    from the batch RNG) and its own graph; backward passes run in the
    main thread in shard order and gradients are combined weighted by
    each shard's masked-point count, which matches the single-batch
    masked mean for both loss terms.
    """
    n = batch.n_stays
    n_shards = min(n_shards, n)
    bounds = np.linspace(0, n, n_shards + 1).astype(int)
    shard_rngs = rng.spawn(n_shards)

    def slice_batch(lo: int, hi: int) -> Batch:
        return Batch(
            stay_ids=batch.stay_ids[lo:hi],
            values=batch.values[lo:hi],
            decay=batch.decay[lo:hi],
            static=batch.static[lo:hi],
            diagnoses=None if batch.diagnoses is None else batch.diagnoses[lo:hi],
            los_labels=batch.los_labels[lo:hi],
            mortality=batch.mortality[lo:hi],
            data_mask=batch.data_mask[lo:hi],
            loss_mask=batch.loss_mask[lo:hi],
            hour_index=batch.hour_index,
        )

    shards = [slice_batch(bounds[i], bounds[i + 1]) for i in range(n_shards)]

    def run_forward(shard: Batch, shard_rng: np.random.Generator):
        graph = Graph()
        with graph:
            loss = batch_loss(model, shard, loss_name, training=True, rng=shard_rng)
        return graph, loss, int(shard.loss_mask.sum())

    futures = [pool.submit(run_forward, s, r) for s, r in zip(shards, shard_rngs)]
    results = [f.result() for f in futures]

    params = model.parameters()
    tensors = [t for _, t in params]
    total_weight = sum(w for _, _, w in results)
    if total_weight == 0:
        raise DatasetError("batch contains no masked prediction points")
    acc = {name: np.zeros_like(t.data) for name, t in params}
    total_loss = 0.0
    for graph, loss, weight in results:
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite training loss {value}")
        total_loss += value * weight
        backward(graph, loss, tensors)
        w = weight / total_weight
        for name, t in params:
            acc[name] += w * t.grad
    for name, t in params:
        t.grad = acc[name]
    return total_loss / total_weight


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Train a model on the dataset's train split, selecting on val loss.

    Keeps the parameters and norm state of the epoch with the lowest
    validation objective.  A non-finite loss or gradient stops training
    early and the best checkpoint so far is kept; if no epoch finished,
    a TrainingError propagates.  When ``out_dir`` is given, the best
    checkpoint is written to ``checkpoint.npz`` and per-epoch stats to
    ``history.csv`` there.
    """
    errs = train_config.validation_errors()
    if errs:
        raise ConfigError("; ".join(errs))

    dataset = _restrict_for_subset(dataset, train_config.feature_subset)
    config = model_config.bind_dataset(
        n_features=len(dataset.feature_names),
        n_static=len(dataset.static_names),
        n_diagnoses=len(dataset.diagnosis_names),
    )
    start_hour = config.prediction_start_hour

    rng = np.random.default_rng(train_config.seed)
    model = TpcModel(config, rng)
    optimizer = Adam(model.parameters(), train_config.learning_rate)

    train_records = _select_train_records(
        dataset.split_records("train"), train_config.train_fraction, rng
    )
    val_records = dataset.split_records("val")
    if not train_records or not val_records:
        raise DatasetError(
            f"need non-empty train and val splits, got {len(train_records)} train "
            f"and {len(val_records)} val stays"
        )
    log.info(
        "training %s variant on %d stays (%d val), %d epochs",
        config.variant, len(train_records), len(val_records), train_config.epochs,
    )

    signature = feature_signature(
        dataset.feature_names, dataset.static_names, dataset.diagnosis_names
    )
    pool = (
        ThreadPoolExecutor(max_workers=train_config.threads)
        if train_config.threads > 1
        else None
    )

    history: list[EpochStats] = []
    best_val = math.inf
    best_epoch = 0
    best_snap = None
    diverged = False
    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            batches = batch_stays(
                train_records, train_config.batch_size, rng=rng, start_hour=start_hour
            )
            total = 0.0
            count = 0
            try:
                for batch in batches:
                    if pool is None:
                        value = _train_batch_single(model, batch, train_config.loss, rng)
                    else:
                        value = _train_batch_sharded(
                            model, batch, train_config.loss, rng, pool,
                            train_config.threads,
                        )
                    optimizer.step()
                    n = int(batch.loss_mask.sum())
                    total += value * n
                    count += n
            except TrainingError as exc:
                log.error("epoch %d diverged: %s", epoch, exc)
                diverged = True
                break
            train_loss = total / count
            val_loss = dataset_loss(
                model, val_records, train_config.loss,
                train_config.batch_size, start_hour,
            )
            wall = time.perf_counter() - t0
            history.append(EpochStats(epoch, train_loss, val_loss, wall))
            log.info(
                "epoch %d: train %.6f val %.6f (%.1fs)",
                epoch, train_loss, val_loss, wall,
            )
            if not math.isfinite(val_loss):
                log.error("epoch %d: non-finite validation loss; stopping", epoch)
                diverged = True
                break
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_snap = _snapshot_model(model)
    finally:
        if pool is not None:
            pool.shutdown()

    if best_snap is None:
        raise TrainingError(
            "training diverged before completing a single epoch; no checkpoint kept"
        )
    _restore_model(model, best_snap)

    checkpoint_path = None
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.npz")
        save_checkpoint(
            checkpoint_path, model,
            train_config=train_config, signature=signature,
            extra={"best_epoch": best_epoch, "best_val_loss": best_val,
                   "diverged": diverged},
        )
        with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
            for row in history:
                writer.writerow([
                    row.epoch,
                    repr(row.train_loss),
                    repr(row.val_loss),
                    f"{row.wall_seconds:.3f}",
                ])

    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        checkpoint_path=checkpoint_path,
        diverged=diverged,
        feature_names=list(dataset.feature_names),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict_split(model: TpcModel, records: list[StayRecord],
                  batch_size: int = 32) -> PredictionSet:
    """Eval-mode predictions pooled over every (stay, hour) point.

    Points before the first prediction hour and padded cells carry
    ``mask=False`` and are excluded from metrics; ``hour_index`` is the
    1-based hour so mortality metrics can select hour 24.
    """
    start_hour = model.config.prediction_start_hour
    yhat, y, mask, mort_p, mort_l, hours, stays = [], [], [], [], [], [], []
    for batch in batch_stays(records, batch_size, rng=None, start_hour=start_hour):
        with Graph():
            out = model.forward(
                batch.values, batch.decay, batch.static,
                diagnoses=batch.diagnoses, data_mask=batch.data_mask,
                training=False,
            )
            los = out.los.data
            mort = (
                out.mortality.data
                if out.mortality is not None
                else np.full_like(los, 0.5)
            )
        b, t = los.shape
        real = batch.data_mask.ravel()  # drop padded cells: one point per real hour
        yhat.append(los.ravel()[real])
        y.append(batch.los_labels.ravel()[real])
        mask.append(batch.loss_mask.ravel()[real])
        mort_p.append(mort.ravel()[real])
        mort_l.append(np.repeat(batch.mortality, t)[real])
        hours.append(np.tile(batch.hour_index, b)[real])
        stays.append(np.repeat(batch.stay_ids, t)[real])
    return PredictionSet(
        yhat=np.concatenate(yhat),
        y=np.concatenate(y),
        mask=np.concatenate(mask),
        mort_prob=np.concatenate(mort_p),
        mort_label=np.concatenate(mort_l),
        hour_index=np.concatenate(hours),
        stay_id=np.concatenate(stays),
    )


def evaluate(model: TpcModel, dataset: Dataset, split: str = "test",
             batch_size: int = 32) -> tuple[PredictionSet, MetricsReport]:
    """Metrics for one split; mortality metrics blanked for single-task."""
    records = dataset.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} contains no stays")
    pred_set = predict_split(model, records, batch_size=batch_size)
    report = metrics_report(pred_set)
    if not model.config.multitask:
        report.auroc = None
        report.auprc = None
        report.n_mortality_stays = 0
        report.flags = [f for f in report.flags if not f.startswith("mortality")]
        report.flags.append("mortality_head_absent")
    return pred_set, report


def evaluate_checkpoint(path, dataset: Dataset, split: str = "test",
                        batch_size: int = 32) -> tuple[PredictionSet, MetricsReport]:
    """Load a checkpoint and evaluate it, refusing on feature mismatch.

    The checkpoint records a signature of the feature/static/diagnosis
    layout it was trained with; evaluating against a dataset with a
    different layout raises CheckpointError instead of silently
    producing garbage.
    """
    signature = feature_signature(
        dataset.feature_names, dataset.static_names, dataset.diagnosis_names
    )
    model, _meta = load_checkpoint(path, expected_signature=signature)
    return evaluate(model, dataset, split, batch_size=batch_size)
