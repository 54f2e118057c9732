"""Model and training configuration, including the dimension ledger.

The ledger functions are the single source of truth for every layer's
tensor sizes.  With F time-series features, S static features, Y temporal
channels per feature, Z pointwise outputs per layer, and layer index n
(1-based), the full architecture satisfies:

    features entering layer n      R(n) = F + Z*(n-1)
    channels per feature at n      C(1) = 2;  C(n) = Y+1 for n >= 2
    pointwise input width at n     P(n) = R(n)*C(n) + F + S
    head input width               B = (F + Z*N)*(Y+1) + S + E

where E is the diagnosis embedding width (0 when the dataset has no
diagnosis block).  Ablation variants adjust individual terms: the
temporal-only variants never grow R; the pointwise-only variant has one
channel per feature after layer 1; the no-skip variant drops the +1 skip
channel; the no-decay variant removes the F decay rows from P(n).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("tpc", "temp_only", "temp_only_ws", "point_only", "no_skip", "no_decay")

LOS_CLIP_MIN_DAYS = 1.0 / 48.0  # 30 minutes
LOS_CLIP_MAX_DAYS = 100.0


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The dataset-derived sizes (``n_features``, ``n_static``,
    ``n_diagnoses``) default to None and are bound from dataset metadata
    before a model is built.
    """

    n_features: int | None = None  # F: time-series rows (clock rows included)
    n_static: int | None = None  # S: static columns after encoding
    n_diagnoses: int | None = None  # D: diagnosis indicator width
    n_layers: int = 9  # N
    temp_channels: int = 12  # Y: temporal outputs per feature
    point_channels: int = 13  # Z: pointwise outputs per layer
    kernel_size: int = 4  # k: temporal filter taps
    head_hidden: int = 17  # X: width of the final hidden layer
    diagnosis_embed: int = 64  # E: embedding width when diagnoses exist
    dropout_main: float = 0.45
    dropout_temp: float = 0.05
    batch_norm: bool = True
    variant: str = "tpc"
    multitask: bool = False
    mortality_weight: float = 100.0  # alpha in the joint objective
    horizon_hours: int = 336  # truncate inputs after 14 days
    prediction_start_hour: int = 5
    relu_point_skips: bool = False  # apply ReLU to stored pointwise skip rows

    # -- variant wiring flags ------------------------------------------------

    @property
    def has_temporal(self) -> bool:
        return self.variant != "point_only"

    @property
    def has_pointwise(self) -> bool:
        return self.variant not in ("temp_only", "temp_only_ws")

    @property
    def shared_filters(self) -> bool:
        return self.variant == "temp_only_ws"

    @property
    def has_skips(self) -> bool:
        return self.variant != "no_skip"

    @property
    def feeds_decay(self) -> bool:
        return self.variant != "no_decay"

    @property
    def embed_width(self) -> int:
        return self.diagnosis_embed if (self.n_diagnoses or 0) > 0 else 0

    # -- dimension ledger ----------------------------------------------------

    def features_in(self, n: int) -> int:
        """R(n): features entering layer n."""
        if not self.has_pointwise:
            return self.n_features
        return self.n_features + self.point_channels * (n - 1)

    def channels_in(self, n: int) -> int:
        """C(n): channels per feature entering layer n."""
        if n == 1:
            return 2  # scaled value and its decay indicator
        return self.channels_out(n - 1)

    def channels_out(self, n: int) -> int:
        """Channels per feature in the output block of layer n >= 1."""
        if self.variant == "point_only":
            return 1
        if self.variant == "no_skip":
            return self.temp_channels
        return self.temp_channels + 1

    def point_input_width(self, n: int) -> int | None:
        """P(n): width of the pointwise input at layer n (None if the
        variant has no pointwise branch)."""
        if not self.has_pointwise:
            return None
        width = self.features_in(n) * self.channels_in(n) + self.n_static
        if self.feeds_decay:
            width += self.n_features
        return width

    def head_input_width(self) -> int:
        """B: width of the per-hour input to the final head."""
        feats = self.features_in(self.n_layers + 1)
        ch = self.channels_out(self.n_layers)
        return feats * ch + self.n_static + self.embed_width

    def parameter_count(self) -> int:
        """Closed-form count of learnable scalars for this configuration."""
        total = 0
        for n in range(1, self.n_layers + 1):
            r = self.features_in(n)
            c = self.channels_in(n)
            if self.has_temporal:
                banks = 1 if self.shared_filters else r
                total += banks * self.temp_channels * c * self.kernel_size
                if self.batch_norm:
                    total += 2 * r * self.temp_channels
            if self.has_pointwise:
                total += self.point_channels * self.point_input_width(n) + self.point_channels
                if self.batch_norm:
                    total += 2 * self.point_channels
        if self.embed_width:
            total += self.embed_width * self.n_diagnoses + self.embed_width
        width = self.head_input_width()
        total += self.head_hidden * width + self.head_hidden
        total += self.head_hidden + 1
        if self.multitask:
            total += self.head_hidden + 1
        return total

    # -- validation ----------------------------------------------------------

    def validation_errors(self) -> list[str]:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel_size < 1:
            errs.append(
                "kernel_size violates the temporal filter contract "
                "out[t] = sum_{j=1..k} f_j * x[t-d(j-1)]: k must be >= 1, "
                f"got {self.kernel_size}"
            )
        if self.n_layers < 1:
            errs.append(f"n_layers must be >= 1, got {self.n_layers}")
        if self.has_temporal and self.temp_channels < 1:
            errs.append(f"temp_channels must be >= 1, got {self.temp_channels}")
        if self.has_pointwise and self.point_channels < 1:
            errs.append(
                "point_channels violates the feature-growth relation "
                f"R(n) = F + Z*(n-1): Z must be >= 1, got {self.point_channels}"
            )
        if self.head_hidden < 1:
            errs.append(f"head_hidden must be >= 1, got {self.head_hidden}")
        if self.diagnosis_embed < 1:
            errs.append(f"diagnosis_embed must be >= 1, got {self.diagnosis_embed}")
        for name in ("dropout_main", "dropout_temp"):
            val = getattr(self, name)
            if not 0.0 <= val < 1.0:
                errs.append(f"{name} must be in [0, 1), got {val}")
        if self.mortality_weight < 0:
            errs.append(f"mortality_weight must be >= 0, got {self.mortality_weight}")
        if self.prediction_start_hour < 1:
            errs.append(
                f"prediction_start_hour must be >= 1, got {self.prediction_start_hour}"
            )
        if self.horizon_hours < self.prediction_start_hour:
            errs.append(
                f"horizon_hours ({self.horizon_hours}) must be >= "
                f"prediction_start_hour ({self.prediction_start_hour})"
            )
        for name in ("n_features", "n_static", "n_diagnoses"):
            val = getattr(self, name)
            if val is not None and val < 0:
                errs.append(f"{name} must be >= 0, got {val}")
        if self.n_features is not None and self.n_features < 1:
            errs.append(f"n_features must be >= 1 once bound, got {self.n_features}")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.validation_errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def bound(self) -> bool:
        return None not in (self.n_features, self.n_static, self.n_diagnoses)

    def bind_dataset(self, n_features: int, n_static: int, n_diagnoses: int) -> "ModelConfig":
        self.n_features = int(n_features)
        self.n_static = int(n_static)
        self.n_diagnoses = int(n_diagnoses)
        return self.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    batch_size: int = 32
    learning_rate: float = 0.00226
    epochs: int = 15
    seed: int = 0
    loss: str = "msle"  # msle | mse
    train_fraction: float = 1.0
    feature_subset: str = "all"  # all | labs | other
    threads: int = 1

    def validation_errors(self) -> list[str]:
        errs = []
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            errs.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in ("msle", "mse"):
            errs.append(f"loss must be 'msle' or 'mse', got {self.loss!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            errs.append(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.feature_subset not in ("all", "labs", "other"):
            errs.append(
                f"feature_subset must be 'all', 'labs' or 'other', got {self.feature_subset!r}"
            )
        if self.threads < 1:
            errs.append(f"threads must be >= 1, got {self.threads}")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.validation_errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def validate_config(source: str | Path | dict | None) -> tuple[ModelConfig, TrainConfig, list[str]]:
    """Build configs from a flat JSON document, collecting all errors.

    Unknown keys, type mismatches, and constraint violations are reported
    together; unset fields receive their defaults.  Returns
    (model_config, train_config, errors); the configs are only meaningful
    when the error list is empty.
    """
    if source is None:
        raw: dict = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as err:
            return ModelConfig(), TrainConfig(), [f"cannot read config file: {err}"]
        if not isinstance(raw, dict):
            return ModelConfig(), TrainConfig(), ["config document must be a JSON object"]

    errors: list[str] = []
    model_kwargs, train_kwargs = {}, {}
    for key, value in raw.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = value
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = value
        else:
            errors.append(f"unknown config key: {key!r}")
    try:
        model = ModelConfig(**model_kwargs)
    except TypeError as err:
        errors.append(str(err))
        model = ModelConfig()
    try:
        train = TrainConfig(**train_kwargs)
    except TypeError as err:
        errors.append(str(err))
        train = TrainConfig()
    errors.extend(model.validation_errors())
    errors.extend(train.validation_errors())
    return model, train, errors
