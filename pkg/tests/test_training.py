"""Trainer behavior: batching, Adam, the loop contract, evaluation."""

import math
import os

import numpy as np
import pandas as pd
import pytest

from tpcnet.autodiff import Graph, backward
from tpcnet.checkpoint import CheckpointError, load_checkpoint
from tpcnet.config import ModelConfig, TrainConfig
from tpcnet.errors import ConfigError, DatasetError, TrainingError
from tpcnet.model import TpcModel
from tpcnet.pipeline import GenConfig, generate_synthetic_cohort, preprocess_raw
from tpcnet.training import (
    Adam,
    Batch,
    batch_loss,
    batch_stays,
    dataset_loss,
    evaluate,
    evaluate_checkpoint,
    make_batch,
    predict_split,
    train,
)

from oracles import adam_first_step
from test_model import tiny_config


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """A small end-to-end dataset shared by the loop tests."""
    root = tmp_path_factory.mktemp("trainer_cohort")
    raw = root / "raw"
    out = root / "processed"
    generate_synthetic_cohort(GenConfig(n_patients=36, seed=3, max_stay_hours=160), raw)
    return preprocess_raw(raw, out, seed=3)


def small_model_config(**overrides) -> ModelConfig:
    defaults = dict(
        n_layers=2,
        temp_channels=2,
        point_channels=2,
        kernel_size=2,
        head_hidden=4,
        diagnosis_embed=4,
        dropout_main=0.0,
        dropout_temp=0.0,
        batch_norm=True,
        variant="tpc",
        multitask=False,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def fast_train_config(**overrides) -> TrainConfig:
    defaults = dict(batch_size=16, learning_rate=0.01, epochs=3, seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def synthetic_records(lengths, n_feat=3, n_static=2, n_diag=0, seed=0):
    """Hand-built stay records with valid label curves."""
    from tpcnet.pipeline import StayRecord, los_label_curve

    rng = np.random.default_rng(seed)
    records = []
    for i, t in enumerate(lengths):
        records.append(
            StayRecord(
                stay_id=i + 1,
                patient_id=i + 1,
                values=rng.normal(size=(n_feat, t)),
                decay=rng.uniform(size=(n_feat, t)),
                static=rng.normal(size=n_static),
                diagnoses=rng.integers(0, 2, size=n_diag).astype(np.float64),
                los_labels=los_label_curve(t + 20.0, t),
                mortality=int(i % 2),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


class TestBatching:
    def test_mask_counts_for_mixed_lengths(self):
        batch = make_batch(synthetic_records([10, 14]), start_hour=5)
        # hours 5..10 and 5..14 are predictable: 6 + 10 points
        assert batch.loss_mask.sum() == 16
        assert batch.data_mask.sum() == 10 + 14
        assert batch.values.shape == (2, 3, 14)
        assert list(batch.hour_index) == list(range(1, 15))

    def test_padding_is_masked_out(self):
        batch = make_batch(synthetic_records([6, 9]))
        assert not batch.data_mask[0, 6:].any()
        assert not batch.loss_mask[0, 6:].any()
        assert np.all(batch.values[0, :, 6:] == 0.0)
        # labels in the padded region are pinned to a log-safe constant
        assert np.all(batch.los_labels[0, 6:] == 1.0)

    def test_every_stay_in_exactly_one_batch(self):
        records = synthetic_records([6, 7, 8, 9, 10, 11, 12])
        batches = batch_stays(records, batch_size=3, rng=np.random.default_rng(1))
        seen = [sid for b in batches for sid in b.stay_ids]
        assert sorted(seen) == [1, 2, 3, 4, 5, 6, 7]
        assert [b.n_stays for b in batches] == [3, 3, 1]

    def test_shuffle_is_seeded(self):
        records = synthetic_records(list(range(6, 26)))
        order_a = [
            sid
            for b in batch_stays(records, 4, rng=np.random.default_rng(7))
            for sid in b.stay_ids
        ]
        order_b = [
            sid
            for b in batch_stays(records, 4, rng=np.random.default_rng(7))
            for sid in b.stay_ids
        ]
        order_c = [
            sid
            for b in batch_stays(records, 4, rng=np.random.default_rng(8))
            for sid in b.stay_ids
        ]
        assert order_a == order_b
        assert order_a != order_c
        # no generator: evaluation order is input order
        plain = [sid for b in batch_stays(records, 4) for sid in b.stay_ids]
        assert plain == [r.stay_id for r in records]

    def test_empty_batch_rejected(self):
        with pytest.raises(DatasetError):
            make_batch([])

    def test_padded_cells_cannot_influence_loss_or_gradients(self):
        """Garbage written into padded cells changes nothing, bitwise."""
        config = tiny_config("tpc", multitask=True).bind_dataset(
            n_features=3, n_static=2, n_diagnoses=4
        )
        records = synthetic_records([8, 12], n_feat=3, n_static=2, n_diag=4)
        batch = make_batch(records)

        def run(b: Batch):
            model = TpcModel(config, np.random.default_rng(0))
            params = model.parameters()
            with Graph() as g:
                loss = batch_loss(model, b, "msle", training=True,
                                  rng=np.random.default_rng(3))
                backward(g, loss, [t for _, t in params])
            grads = {name: t.grad.copy() for name, t in params}
            return float(loss.data), grads

        loss_clean, grads_clean = run(batch)

        poisoned = Batch(
            stay_ids=batch.stay_ids,
            values=batch.values.copy(),
            decay=batch.decay.copy(),
            static=batch.static,
            diagnoses=batch.diagnoses,
            los_labels=batch.los_labels.copy(),
            mortality=batch.mortality,
            data_mask=batch.data_mask,
            loss_mask=batch.loss_mask,
            hour_index=batch.hour_index,
        )
        pad = ~batch.data_mask
        poisoned.values[np.broadcast_to(pad[:, None, :], poisoned.values.shape)] = 1e6
        poisoned.decay[np.broadcast_to(pad[:, None, :], poisoned.decay.shape)] = 0.5
        poisoned.los_labels[pad] = 777.0

        loss_poisoned, grads_poisoned = run(poisoned)
        assert loss_poisoned == loss_clean
        for name in grads_clean:
            np.testing.assert_array_equal(grads_poisoned[name], grads_clean[name])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_first_step_matches_closed_form(self):
        from tpcnet.autodiff import Tensor

        theta = Tensor(np.array([1.0]), requires_grad=True, name="theta")
        opt = Adam([("theta", theta)], learning_rate=0.1)
        with Graph() as g:
            from tpcnet.autodiff import mul

            loss = mul(mul(theta, theta), 0.5)
            backward(g, loss, [theta])
        opt.step()
        expected = 1.0 + adam_first_step(grad=1.0, lr=0.1)
        assert theta.data[0] == pytest.approx(expected, abs=1e-15)
        assert theta.data[0] == pytest.approx(0.9, abs=1e-9)

    def test_quadratic_converges(self):
        from tpcnet.autodiff import Tensor, mul

        theta = Tensor(np.array([3.0]), requires_grad=True, name="theta")
        opt = Adam([("theta", theta)], learning_rate=0.05)
        for _ in range(200):
            with Graph() as g:
                loss = mul(mul(theta, theta), 0.5)
                backward(g, loss, [theta])
            opt.step()
        assert abs(theta.data[0]) < 1e-3

    def test_non_finite_gradient_aborts_with_name(self):
        from tpcnet.autodiff import Tensor

        theta = Tensor(np.array([1.0]), requires_grad=True, name="theta")
        theta.grad = np.array([np.nan])
        opt = Adam([("theta", theta)], learning_rate=0.1)
        with pytest.raises(TrainingError, match="theta"):
            opt.step()
        # the failed step must not advance optimizer state
        assert opt.step_count == 0
        assert np.all(opt._m["theta"] == 0.0)

    def test_missing_gradient_rejected(self):
        from tpcnet.autodiff import Tensor

        theta = Tensor(np.array([1.0]), requires_grad=True, name="theta")
        opt = Adam([("theta", theta)], learning_rate=0.1)
        with pytest.raises(TrainingError, match="no gradient"):
            opt.step()


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


class TestTrainLoop:
    def test_best_checkpoint_selection_and_artifacts(self, cohort, tmp_path):
        out = tmp_path / "run"
        result = train(cohort, small_model_config(), fast_train_config(epochs=4), out_dir=out)
        assert len(result.history) == 4
        val = [h.val_loss for h in result.history]
        assert result.best_val_loss == min(val)
        assert result.best_epoch == int(np.argmin(val)) + 1

        # artifacts: checkpoint restores bitwise, history round-trips exactly
        assert os.path.exists(result.checkpoint_path)
        model, meta = load_checkpoint(result.checkpoint_path)
        for (name, tensor) in model.parameters():
            np.testing.assert_array_equal(tensor.data, result.model.param(name).data)
        assert meta["best_epoch"] == result.best_epoch
        assert meta["best_val_loss"] == result.best_val_loss
        assert meta["train"]["seed"] == 0

        hist = pd.read_csv(out / "history.csv", float_precision="round_trip")
        assert list(hist.columns) == ["epoch", "train_loss", "val_loss", "wall_seconds"]
        assert list(hist["epoch"]) == [1, 2, 3, 4]
        assert list(hist["val_loss"]) == val

    def test_restored_model_reproduces_best_val_loss(self, cohort):
        config = small_model_config()
        tc = fast_train_config(epochs=3)
        result = train(cohort, config, tc)
        recomputed = dataset_loss(
            result.model,
            cohort.split_records("val"),
            tc.loss,
            tc.batch_size,
            result.model.config.prediction_start_hour,
        )
        assert recomputed == result.best_val_loss

    def test_training_is_bitwise_deterministic(self, cohort):
        config = small_model_config(dropout_main=0.2, dropout_temp=0.05)
        tc = fast_train_config(epochs=2)
        a = train(cohort, config, tc)
        b = train(cohort, config, tc)
        assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]
        assert [h.val_loss for h in a.history] == [h.val_loss for h in b.history]
        for (name, ta), (_, tb) in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)

    def test_seed_changes_the_run(self, cohort):
        config = small_model_config()
        a = train(cohort, config, fast_train_config(epochs=1, seed=0))
        b = train(cohort, config, fast_train_config(epochs=1, seed=1))
        assert a.history[0].train_loss != b.history[0].train_loss

    def test_train_fraction_subsamples_exact_count(self, cohort):
        from tpcnet.training import _select_train_records

        records = cohort.split_records("train")
        rng = np.random.default_rng(0)
        half = _select_train_records(records, 0.5, rng)
        assert len(half) == math.floor(0.5 * len(records))
        ids = {r.stay_id for r in records}
        assert all(r.stay_id in ids for r in half)
        # seeded: same rng seed selects the same stays
        again = _select_train_records(records, 0.5, np.random.default_rng(0))
        assert [r.stay_id for r in half] == [r.stay_id for r in again]

    def test_feature_subset_restricts_rows(self, cohort):
        kinds = cohort.meta["feature_kinds"]
        n_labs = sum(1 for k in kinds.values() if k == "lab")
        result = train(
            cohort,
            small_model_config(),
            fast_train_config(epochs=1, feature_subset="labs"),
        )
        assert len(result.feature_names) == n_labs
        assert result.model.config.n_features == n_labs
        result_other = train(
            cohort,
            small_model_config(),
            fast_train_config(epochs=1, feature_subset="other"),
        )
        assert len(result_other.feature_names) == len(kinds) - n_labs
        # clock features count as non-lab rows
        assert "time_in_icu" in result_other.feature_names

    def test_divergence_keeps_best_checkpoint(self, cohort, monkeypatch):
        import tpcnet.training as training_mod

        real = training_mod._train_batch_single
        calls = {"epoch_batches": 0, "fail_after": None}

        def wrapper(model, batch, loss_name, rng):
            if calls["fail_after"] is not None and calls["epoch_batches"] >= calls["fail_after"]:
                raise TrainingError("synthetic overflow for testing")
            calls["epoch_batches"] += 1
            return real(model, batch, loss_name, rng)

        monkeypatch.setattr(training_mod, "_train_batch_single", wrapper)
        # let two epochs finish, then fail
        clean = train(cohort, small_model_config(), fast_train_config(epochs=2))
        n_batches_per_epoch = calls["epoch_batches"] // 2
        calls["epoch_batches"] = 0
        calls["fail_after"] = 2 * n_batches_per_epoch  # first batch of epoch 3
        result = train(cohort, small_model_config(), fast_train_config(epochs=5))
        assert result.diverged
        assert len(result.history) == 2
        assert result.best_val_loss == min(h.val_loss for h in result.history)
        # identical to the clean 2-epoch run: the kept model is the pre-failure best
        for (name, ta), (_, tb) in zip(result.model.parameters(), clean.model.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)

    def test_divergence_before_first_epoch_raises(self, cohort, monkeypatch):
        import tpcnet.training as training_mod

        def explode(model, batch, loss_name, rng):
            raise TrainingError("synthetic overflow for testing")

        monkeypatch.setattr(training_mod, "_train_batch_single", explode)
        with pytest.raises(TrainingError, match="no checkpoint kept"):
            train(cohort, small_model_config(), fast_train_config(epochs=2))

    def test_invalid_train_config_rejected(self, cohort):
        with pytest.raises(ConfigError, match="loss"):
            train(cohort, small_model_config(), fast_train_config(loss="mae"))

    def test_threaded_mode_runs(self, cohort):
        result = train(
            cohort,
            small_model_config(),
            fast_train_config(epochs=2, threads=3),
        )
        assert len(result.history) == 2
        assert all(math.isfinite(h.val_loss) for h in result.history)

    def test_mse_loss_option(self, cohort):
        result = train(cohort, small_model_config(), fast_train_config(epochs=1, loss="mse"))
        assert math.isfinite(result.history[0].train_loss)


# ---------------------------------------------------------------------------
# Multitask gradient equality at zero weight
# ---------------------------------------------------------------------------


class TestMultitaskZeroWeight:
    def test_alpha_zero_matches_single_task_gradients_bitwise(self):
        single_cfg = tiny_config("tpc", multitask=False,
                                 dropout_main=0.3, dropout_temp=0.1).bind_dataset(
            n_features=3, n_static=2, n_diagnoses=4
        )
        multi_cfg = tiny_config("tpc", multitask=True, mortality_weight=0.0,
                                dropout_main=0.3, dropout_temp=0.1).bind_dataset(
            n_features=3, n_static=2, n_diagnoses=4
        )
        # mortality-head parameters are drawn last, so the shared
        # parameters of the two models start bitwise identical
        single = TpcModel(single_cfg, np.random.default_rng(11))
        multi = TpcModel(multi_cfg, np.random.default_rng(11))
        shared_names = {name for name, _ in single.parameters()}
        for name in shared_names:
            np.testing.assert_array_equal(single.param(name).data, multi.param(name).data)

        records = synthetic_records([9, 13], n_feat=3, n_static=2, n_diag=4, seed=4)
        batch = make_batch(records)

        def grads(model):
            params = model.parameters()
            with Graph() as g:
                loss = batch_loss(model, batch, "msle", training=True,
                                  rng=np.random.default_rng(21))
                backward(g, loss, [t for _, t in params])
            return float(loss.data), {name: t.grad.copy() for name, t in params}

        loss_s, grads_s = grads(single)
        loss_m, grads_m = grads(multi)
        assert loss_m == loss_s
        for name in shared_names:
            np.testing.assert_array_equal(grads_m[name], grads_s[name], err_msg=name)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class TestEvaluate:
    def test_prediction_set_layout(self, cohort):
        result = train(cohort, small_model_config(), fast_train_config(epochs=1))
        pred_set, report = evaluate(result.model, cohort, "val")
        records = cohort.split_records("val")
        assert len(pred_set.yhat) == sum(r.n_hours for r in records)
        # masked points are exactly the hours >= 5 of each stay
        assert pred_set.mask.sum() == sum(r.n_hours - 4 for r in records)
        assert not pred_set.mask[pred_set.hour_index < 5].any()
        assert report.n_los_points == int(pred_set.mask.sum())
        assert math.isfinite(report.msle)
        yhat, _ = pred_set.masked()
        assert np.all(yhat >= 1 / 48) and np.all(yhat <= 100.0)

    def test_single_task_blanks_mortality_metrics(self, cohort):
        result = train(cohort, small_model_config(), fast_train_config(epochs=1))
        _, report = evaluate(result.model, cohort, "val")
        assert report.auroc is None
        assert report.auprc is None
        assert "mortality_head_absent" in report.flags

    def test_multitask_reports_mortality_at_hour_24(self, cohort):
        result = train(
            cohort,
            small_model_config(multitask=True, mortality_weight=10.0),
            fast_train_config(epochs=1),
        )
        pred_set, report = evaluate(result.model, cohort, "val")
        probs, labels = pred_set.at_hour24()
        eligible = [r for r in cohort.split_records("val") if r.n_hours >= 24]
        assert len(probs) == len(eligible)
        assert report.n_mortality_stays == len(eligible)
        if len(set(labels.tolist())) == 2:
            assert report.auroc is not None and 0.0 <= report.auroc <= 1.0

    def test_checkpoint_evaluation_matches_in_memory(self, cohort, tmp_path):
        result = train(
            cohort, small_model_config(), fast_train_config(epochs=2),
            out_dir=tmp_path,
        )
        _, direct = evaluate(result.model, cohort, "test")
        _, via_ckpt = evaluate_checkpoint(result.checkpoint_path, cohort, "test")
        assert via_ckpt.to_json() == direct.to_json()

    def test_checkpoint_refuses_mismatched_features(self, cohort, tmp_path):
        result = train(
            cohort, small_model_config(), fast_train_config(epochs=1),
            out_dir=tmp_path,
        )
        narrowed = cohort.restrict_features(cohort.feature_names[:5])
        with pytest.raises(CheckpointError, match="feature layout"):
            evaluate_checkpoint(result.checkpoint_path, narrowed, "test")

    def test_unknown_split_rejected(self, cohort):
        model = TpcModel(
            small_model_config().bind_dataset(
                n_features=len(cohort.feature_names),
                n_static=len(cohort.static_names),
                n_diagnoses=len(cohort.diagnosis_names),
            ),
            np.random.default_rng(0),
        )
        with pytest.raises(DatasetError):
            evaluate(model, cohort, "holdout")

    def test_predict_split_is_deterministic(self, cohort):
        model = train(cohort, small_model_config(), fast_train_config(epochs=1)).model
        records = cohort.split_records("val")
        a = predict_split(model, records)
        b = predict_split(model, records)
        np.testing.assert_array_equal(a.yhat, b.yhat)
        np.testing.assert_array_equal(a.mort_prob, b.mort_prob)
