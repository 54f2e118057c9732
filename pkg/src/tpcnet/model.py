"""The temporal-pointwise convolution model and its ablation variants.

Layer n (1-based) receives a block h of shape [B, R(n), C(n), T]: one row
of C(n) channels per feature.  Two branches act on it in parallel:

* a grouped dilated causal convolution (dilation = n) producing Y new
  temporal channels per feature, and
* a pointwise (per-timestep) linear map over the flattened block plus the
  static features and the decay indicators, producing Z brand-new
  features.

The layer output concatenates, per feature, the Y temporal channels with
one skip channel (the original scaled value for original features, the
stored pointwise output for features a previous layer created), then
appends the Z new pointwise features broadcast across all channels, and
applies one ReLU to the assembled block.  After N layers a per-hour head
maps the flattened block (plus statics and an embedded diagnosis vector)
through one hidden layer to the remaining length-of-stay — exponentiated
and clamped to [half an hour, 100 days] — and, in multitask mode, to an
in-hospital mortality probability sharing the same hidden layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNorm,
    Tensor,
    broadcast_repeat,
    concat,
    dropout,
    exp,
    grouped_causal_conv,
    hardtanh,
    pointwise_linear,
    relu,
    reshape,
    sigmoid,
)
from .config import LOS_CLIP_MAX_DAYS, LOS_CLIP_MIN_DAYS, ModelConfig
from .errors import ConfigError, DimensionError

# Clamp on the pre-exponential linear output, one natural-log unit wider
# than the prediction clamp on each side.  Inside [ln(min), ln(max)] it is
# the identity, and outside that range the post-exp clamp saturates (with
# zero gradient) anyway, so predictions and gradients are unchanged — the
# only effect is that exp() never overflows.
_PRE_EXP_LOW = math.log(LOS_CLIP_MIN_DAYS) - 1.0
_PRE_EXP_HIGH = math.log(LOS_CLIP_MAX_DAYS) + 1.0


@dataclass
class ModelOutput:
    """Per-hour predictions for a padded batch."""

    los: Tensor  # [B, T] remaining length-of-stay, days
    mortality: Tensor | None  # [B, T] mortality probability (multitask only)


class TpcModel:
    """A wired variant of the temporal-pointwise convolution network."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if not config.bound():
            raise ConfigError(
                "model config must be bound to dataset sizes "
                "(n_features, n_static, n_diagnoses) before building"
            )
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self._params: dict[str, Tensor] = {}
        self._temp_norms: dict[int, BatchNorm] = {}
        self._point_norms: dict[int, BatchNorm] = {}
        self._build(rng)

    # -- construction --------------------------------------------------------

    def _add_param(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def _uniform(self, rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = math.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        for n in range(1, cfg.n_layers + 1):
            r, c = cfg.features_in(n), cfg.channels_in(n)
            y, z, k = cfg.temp_channels, cfg.point_channels, cfg.kernel_size
            if cfg.has_temporal:
                banks = 1 if cfg.shared_filters else r
                self._add_param(
                    f"layer{n:02d}.temporal_filters",
                    self._uniform(rng, (banks, y, c, k), fan_in=c * k),
                )
                if cfg.batch_norm:
                    norm = BatchNorm(r * y)
                    self._temp_norms[n] = norm
                    self._add_param(f"layer{n:02d}.temp_norm.gamma", norm.gamma)
                    self._add_param(f"layer{n:02d}.temp_norm.beta", norm.beta)
            if cfg.has_pointwise:
                p = cfg.point_input_width(n)
                self._add_param(
                    f"layer{n:02d}.point_weight", self._uniform(rng, (z, p), fan_in=p)
                )
                self._add_param(f"layer{n:02d}.point_bias", Tensor(np.zeros(z)))
                if cfg.batch_norm:
                    norm = BatchNorm(z)
                    self._point_norms[n] = norm
                    self._add_param(f"layer{n:02d}.point_norm.gamma", norm.gamma)
                    self._add_param(f"layer{n:02d}.point_norm.beta", norm.beta)
        if cfg.embed_width:
            d, e = cfg.n_diagnoses, cfg.embed_width
            self._add_param("diagnosis_embed.weight", self._uniform(rng, (e, d), fan_in=d))
            self._add_param("diagnosis_embed.bias", Tensor(np.zeros(e)))
        width = cfg.head_input_width()
        x = cfg.head_hidden
        self._add_param("head.hidden_weight", self._uniform(rng, (x, width), fan_in=width))
        self._add_param("head.hidden_bias", Tensor(np.zeros(x)))
        self._add_param("head.los_weight", self._uniform(rng, (1, x), fan_in=x))
        self._add_param("head.los_bias", Tensor(np.zeros(1)))
        if cfg.multitask:
            self._add_param("head.mortality_weight", self._uniform(rng, (1, x), fan_in=x))
            self._add_param("head.mortality_bias", Tensor(np.zeros(1)))

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def norms(self) -> list[tuple[str, BatchNorm]]:
        out = []
        for n, norm in sorted(self._temp_norms.items()):
            out.append((f"layer{n:02d}.temp_norm", norm))
        for n, norm in sorted(self._point_norms.items()):
            out.append((f"layer{n:02d}.point_norm", norm))
        return out

    # -- forward pass ----------------------------------------------------------

    def forward(
        self,
        values,
        decay,
        static,
        diagnoses=None,
        data_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ModelOutput:
        """Run the network over a padded batch.

        ``values`` and ``decay`` are [B, F, T] (Tensor or ndarray),
        ``static`` [B, S], ``diagnoses`` [B, D] (None allowed when D=0).
        ``data_mask`` [B, T] marks real (non-padded) cells and drives the
        batch-norm statistics; it is not the loss mask.  In training mode
        with nonzero dropout rates, ``rng`` supplies the dropout draws.
        """
        cfg = self.config
        values_t = values if isinstance(values, Tensor) else Tensor(values)
        decay_t = decay if isinstance(decay, Tensor) else Tensor(decay)
        static_t = static if isinstance(static, Tensor) else Tensor(static)
        if values_t.ndim != 3:
            raise DimensionError(
                f"values must be [batch, features, hours], got shape {values_t.shape}"
            )
        b, f, t = values_t.shape
        if f != cfg.n_features:
            raise DimensionError(f"expected {cfg.n_features} features, got {f}")
        if decay_t.shape != (b, f, t):
            raise DimensionError(f"decay shape {decay_t.shape} != values shape {(b, f, t)}")
        if static_t.shape != (b, cfg.n_static):
            raise DimensionError(
                f"static shape {static_t.shape} != {(b, cfg.n_static)}"
            )
        if cfg.n_diagnoses > 0:
            diag_t = diagnoses if isinstance(diagnoses, Tensor) else Tensor(diagnoses)
            if diag_t.shape != (b, cfg.n_diagnoses):
                raise DimensionError(
                    f"diagnoses shape {diag_t.shape} != {(b, cfg.n_diagnoses)}"
                )
        else:
            diag_t = None
        if training and rng is None and (cfg.dropout_main > 0 or cfg.dropout_temp > 0):
            raise ConfigError("training-mode forward with dropout requires an rng")

        # Layer-1 block: value and decay channels per feature.  The
        # no-decay variant replaces the decay channel with a constant
        # zero, so nothing downstream can read observation recency.
        decay_channel = decay_t if cfg.feeds_decay else Tensor(np.zeros((b, f, t)))
        h = concat(
            [reshape(values_t, (b, f, 1, t)), reshape(decay_channel, (b, f, 1, t))], axis=2
        )
        static_bc = broadcast_repeat(static_t, axis=2, count=t)  # [B, S, T]

        point_history: list[Tensor] = []
        for n in range(1, cfg.n_layers + 1):
            r, c = cfg.features_in(n), cfg.channels_in(n)
            if h.shape != (b, r, c, t):
                raise DimensionError(
                    f"layer {n} ledger mismatch: block is {h.shape}, "
                    f"expected {(b, r, c, t)} from R(n)={r}, C(n)={c}"
                )
            temp = (
                self._temporal_branch(n, h, data_mask, training, rng)
                if cfg.has_temporal
                else None
            )
            point = (
                self._pointwise_branch(n, h, static_bc, decay_t, data_mask, training, rng)
                if cfg.has_pointwise
                else None
            )
            h = self._assemble_layer_output(n, temp, point, values_t, point_history)
            if point is not None:
                point_history.append(relu(point) if cfg.relu_point_skips else point)

        return self._final_head(h, static_bc, diag_t, training, rng)

    def _temporal_branch(self, n, h, data_mask, training, rng) -> Tensor:
        cfg = self.config
        b, r, c, t = h.shape
        y = cfg.temp_channels
        out = grouped_causal_conv(h, self._params[f"layer{n:02d}.temporal_filters"], n)
        if cfg.batch_norm:
            norm = self._temp_norms[n]
            out = reshape(norm(reshape(out, (b, r * y, t)), data_mask, training), (b, r, y, t))
        return dropout(out, cfg.dropout_temp, rng, training)

    def _pointwise_branch(self, n, h, static_bc, decay_t, data_mask, training, rng) -> Tensor:
        cfg = self.config
        b, r, c, t = h.shape
        parts = [reshape(h, (b, r * c, t)), static_bc]
        if cfg.feeds_decay:
            parts.append(decay_t)
        point_in = concat(parts, axis=1)
        expected = cfg.point_input_width(n)
        if point_in.shape[1] != expected:
            raise DimensionError(
                f"layer {n} pointwise ledger mismatch: input width "
                f"{point_in.shape[1]}, expected P(n)={expected}"
            )
        out = pointwise_linear(
            point_in,
            self._params[f"layer{n:02d}.point_weight"],
            self._params[f"layer{n:02d}.point_bias"],
        )
        if cfg.batch_norm:
            out = self._point_norms[n](out, data_mask, training)
        return dropout(out, cfg.dropout_main, rng, training)

    def _assemble_layer_output(self, n, temp, point, values_t, point_history) -> Tensor:
        """Concatenate branch outputs into the next block and apply ReLU.

        Skip rows re-inject the raw scaled values (original features) and
        the stored pointwise outputs (features created by earlier layers);
        the block-wide ReLU is the only activation.
        """
        cfg = self.config
        if cfg.has_skips:
            skip_rows = concat([values_t] + point_history, axis=1) if point_history else values_t
            b, r, t = skip_rows.shape
            skip_block = reshape(skip_rows, (b, r, 1, t))
            main = concat([temp, skip_block], axis=2) if temp is not None else skip_block
        else:
            main = temp
        blocks = [main]
        if point is not None:
            blocks.append(broadcast_repeat(point, axis=2, count=main.shape[2]))
        return relu(concat(blocks, axis=1) if len(blocks) > 1 else blocks[0])

    def _embed_diagnoses(self, diag_t: Tensor) -> Tensor:
        b, d = diag_t.shape
        e = relu(
            pointwise_linear(
                reshape(diag_t, (b, d, 1)),
                self._params["diagnosis_embed.weight"],
                self._params["diagnosis_embed.bias"],
            )
        )
        return reshape(e, (b, self.config.embed_width))

    def _final_head(self, h, static_bc, diag_t, training, rng) -> ModelOutput:
        cfg = self.config
        b, feats, ch, t = h.shape
        parts = [reshape(h, (b, feats * ch, t)), static_bc]
        if diag_t is not None:
            parts.append(broadcast_repeat(self._embed_diagnoses(diag_t), axis=2, count=t))
        head_in = concat(parts, axis=1)
        expected = cfg.head_input_width()
        if head_in.shape[1] != expected:
            raise DimensionError(
                f"head ledger mismatch: input width {head_in.shape[1]}, expected B={expected}"
            )
        hidden = relu(
            pointwise_linear(
                head_in, self._params["head.hidden_weight"], self._params["head.hidden_bias"]
            )
        )
        hidden = dropout(hidden, cfg.dropout_main, rng, training)
        lin = pointwise_linear(
            hidden, self._params["head.los_weight"], self._params["head.los_bias"]
        )
        lin = hardtanh(lin, _PRE_EXP_LOW, _PRE_EXP_HIGH)
        los = reshape(hardtanh(exp(lin), LOS_CLIP_MIN_DAYS, LOS_CLIP_MAX_DAYS), (b, t))
        mortality = None
        if cfg.multitask:
            logits = pointwise_linear(
                hidden,
                self._params["head.mortality_weight"],
                self._params["head.mortality_bias"],
            )
            mortality = reshape(sigmoid(logits), (b, t))
        return ModelOutput(los=los, mortality=mortality)


def build_variant(config: ModelConfig, rng: np.random.Generator | None = None) -> TpcModel:
    """Construct the model wired for ``config.variant``."""
    return TpcModel(config, rng)
