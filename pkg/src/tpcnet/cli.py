"""Command-line entry point: one executable covering the whole pipeline.

Subcommands: synth, preprocess, train, eval, attribute, reliability,
simulate, baseline.  Every command writes a JSON run manifest capturing
the command, its configuration, seeds, input-file content hashes, and
output paths — enough to reproduce the run.  Exit codes: 0 success,
1 invalid configuration or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path


from . import analysis
from .checkpoint import load_checkpoint, read_meta
from .config import ModelConfig, TrainConfig, validate_config
from .errors import ConfigError, DomainError, TpcError
from .pipeline import GenConfig, generate_synthetic_cohort, load_dataset, preprocess_raw
from .training import evaluate, train

log = logging.getLogger("tpcnet")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

_DATASET_FILES = ("timeseries.csv", "flat.csv", "diagnoses.csv", "labels.csv", "meta.json")
_RAW_FILES = ("events.csv", "stays.csv", "diagnoses_raw.csv")


class UsageError(Exception):
    """Bad flags or unknown subcommand: report usage, exit 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Reproducibility record written next to every command's outputs."""

    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256 of content
    outputs: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_inputs(paths) -> dict:
    return {str(p): hash_file(p) for p in sorted(map(str, paths)) if os.path.exists(p)}


def dataset_input_paths(data_dir) -> list[Path]:
    return [Path(data_dir) / name for name in _DATASET_FILES]


def manifest_path(out) -> Path:
    """DIR/manifest.json for directory outputs, FILE.manifest.json otherwise."""
    out = Path(out)
    if out.suffix == "" or out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Config file plus flag overrides; all violations reported together."""
    model_cfg, train_cfg, errors = validate_config(getattr(args, "config", None))
    if errors:
        raise ConfigError("; ".join(errors))
    overrides = {
        "variant": getattr(args, "variant", None),
        "multitask": getattr(args, "multitask", None),
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(model_cfg, name, value)
    train_overrides = {
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "loss": getattr(args, "loss", None),
        "train_fraction": getattr(args, "train_fraction", None),
        "feature_subset": getattr(args, "feature_subset", None),
        "threads": getattr(args, "threads", None),
    }
    for name, value in train_overrides.items():
        if value is not None:
            setattr(train_cfg, name, value)
    errors = model_cfg.validation_errors() + train_cfg.validation_errors()
    if errors:
        raise ConfigError("; ".join(errors))
    return model_cfg, train_cfg


def _dataset_for_checkpoint(data_dir, checkpoint_path):
    """Load the dataset and re-apply the checkpoint's feature subset."""
    from .training import _restrict_for_subset

    dataset = load_dataset(data_dir)
    meta = read_meta(checkpoint_path)
    subset = (meta.get("train") or {}).get("feature_subset", "all")
    return _restrict_for_subset(dataset, subset)


# ---------------------------------------------------------------------------
# Subcommand bodies (each returns the manifest it wants written)
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> RunManifest:
    config = GenConfig(
        n_patients=args.patients,
        seed=args.seed,
        max_stay_hours=args.max_stay_hours,
        second_stay_probability=args.second_stay_prob,
    )
    generate_synthetic_cohort(config, args.out)
    outputs = [str(Path(args.out) / n) for n in (*_RAW_FILES, "generator.json")]
    return RunManifest(
        command="synth",
        config=config.to_dict(),
        seeds={"generator": args.seed},
        outputs=outputs,
    )


def _cmd_preprocess(args) -> RunManifest:
    inputs = hash_inputs(Path(args.raw) / n for n in (*_RAW_FILES, "generator.json"))
    preprocess_raw(
        args.raw,
        args.out,
        seed=args.seed,
        horizon=args.horizon,
        prevalence_cutoff=args.prevalence_cutoff,
    )
    return RunManifest(
        command="preprocess",
        config={
            "horizon_hours": args.horizon,
            "prevalence_cutoff": args.prevalence_cutoff,
        },
        seeds={"split": args.seed},
        inputs=inputs,
        outputs=[str(p) for p in dataset_input_paths(args.out)],
    )


def _cmd_train(args) -> RunManifest:
    model_cfg, train_cfg = _load_configs(args)
    input_paths = list(dataset_input_paths(args.data))
    if args.config:
        input_paths.append(Path(args.config))
    inputs = hash_inputs(input_paths)
    dataset = load_dataset(args.data)
    result = train(dataset, model_cfg, train_cfg, out_dir=args.out)
    print(
        f"best epoch {result.best_epoch}: validation loss {result.best_val_loss:.6f}"
        + (" (stopped early: training diverged)" if result.diverged else "")
    )
    return RunManifest(
        command="train",
        config={"model": result.model.config.to_dict(), "train": train_cfg.to_dict()},
        seeds={"train": train_cfg.seed},
        inputs=inputs,
        outputs=[
            str(Path(args.out) / "checkpoint.npz"),
            str(Path(args.out) / "history.csv"),
        ],
    )


def _cmd_eval(args) -> RunManifest:
    inputs = hash_inputs([args.checkpoint, *dataset_input_paths(args.data)])
    dataset = _dataset_for_checkpoint(args.data, args.checkpoint)
    from .checkpoint import feature_signature

    signature = feature_signature(
        dataset.feature_names, dataset.static_names, dataset.diagnosis_names
    )
    model, meta = load_checkpoint(args.checkpoint, expected_signature=signature)
    _, report = evaluate(model, dataset, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_json())
    return RunManifest(
        command="eval",
        config={"split": args.split, "model": meta.get("model", {})},
        inputs=inputs,
        outputs=[str(args.out)],
    )


def _analysis_setup(args):
    inputs = hash_inputs([args.checkpoint, *dataset_input_paths(args.data)])
    dataset = _dataset_for_checkpoint(args.data, args.checkpoint)
    from .checkpoint import feature_signature

    signature = feature_signature(
        dataset.feature_names, dataset.static_names, dataset.diagnosis_names
    )
    model, meta = load_checkpoint(args.checkpoint, expected_signature=signature)
    return inputs, dataset, model, meta


def _cmd_attribute(args) -> RunManifest:
    inputs, dataset, model, _ = _analysis_setup(args)
    result = analysis.attribute_cohort(
        model, dataset, split=args.split, steps=args.steps, max_stays=args.max_stays
    )
    analysis.write_attributions_csv(result, args.out)
    print(f"attributed {result.n_stays} stays; top feature: {result.top(1)[0]}")
    return RunManifest(
        command="attribute",
        config={"split": args.split, "steps": args.steps, "max_stays": args.max_stays},
        inputs=inputs,
        outputs=[str(args.out)],
    )


def _cmd_reliability(args) -> RunManifest:
    inputs, dataset, model, _ = _analysis_setup(args)
    pred_set, _ = evaluate(model, dataset, args.split)
    cells = analysis.reliability_grid(pred_set)
    analysis.write_reliability_csv(cells, args.out)
    populated = sum(1 for c in cells if c.n)
    print(f"reliability grid: {populated}/{len(cells)} cells populated")
    return RunManifest(
        command="reliability",
        config={"split": args.split},
        inputs=inputs,
        outputs=[str(args.out)],
    )


def _cmd_simulate(args) -> RunManifest:
    inputs, dataset, model, _ = _analysis_setup(args)
    pred_set, _ = evaluate(model, dataset, args.split)
    _, true_days, pred_days = analysis.predictions_at_hour(pred_set)
    curve = analysis.simulate_icu(
        true_days,
        pred_days,
        n_runs=args.runs,
        cohort_size=args.cohort_size,
        seed=args.seed,
    )
    analysis.write_simulation_csv(curve, args.out)
    print(f"simulated {args.runs} runs of {args.cohort_size} stays "
          f"over {len(curve.hours)} hours")
    return RunManifest(
        command="simulate",
        config={
            "split": args.split,
            "runs": args.runs,
            "cohort_size": args.cohort_size,
        },
        seeds={"simulation": args.seed},
        inputs=inputs,
        outputs=[str(args.out)],
    )


def _cmd_baseline(args) -> RunManifest:
    inputs = hash_inputs(dataset_input_paths(args.data))
    dataset = load_dataset(args.data)
    predictor, _, report = analysis.evaluate_baseline(dataset, args.kind, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"{args.kind} baseline predicts {predictor.value:.4f} days everywhere")
    print(report.to_json())
    return RunManifest(
        command="baseline",
        config={"kind": args.kind, "split": args.split, "value": predictor.value},
        inputs=inputs,
        outputs=[str(args.out)],
    )


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="tpcnet",
        description="Hourly remaining-stay and mortality prediction on ICU time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic raw cohort")
    p.add_argument("--patients", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-stay-hours", type=int, default=1000)
    p.add_argument("--second-stay-prob", type=float, default=0.10)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="raw CSVs -> model-ready dataset directory")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=336)
    p.add_argument("--prevalence-cutoff", type=float, default=0.01)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with flat config keys")
    p.add_argument("--variant")
    p.add_argument("--multitask", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--loss")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--feature-subset")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attribute", help="integrated-gradients feature attribution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=analysis.DEFAULT_IG_STEPS)
    p.add_argument("--max-stays", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("reliability", help="MAPE grid by stay day and predicted stay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reliability)

    p = sub.add_parser("simulate", help="ward-occupancy simulation from predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--runs", type=int, default=analysis.SIMULATION_RUNS)
    p.add_argument("--cohort-size", type=int, default=analysis.SIMULATION_COHORT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("baseline", help="constant mean/median predictor metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("mean", "median"), default="mean")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_baseline)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("TPC_LOG_LEVEL", "warn").lower()
    level = _LOG_LEVELS.get(level_name)
    if level is None:
        raise ConfigError(
            f"TPC_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {level_name!r}"
        )
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    try:
        _configure_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    started = time.perf_counter()
    try:
        manifest = args.func(args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (ConfigError, DomainError) as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return 1
    except TpcError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    manifest.wall_seconds = time.perf_counter() - started
    manifest.write(manifest_path(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
