"""Training objectives over masked, padded prediction arrays.

All losses take a prediction Tensor plus plain ndarrays for targets and
the eligibility mask, and reduce to a scalar Tensor by averaging over
mask-true cells only.  Cells where the mask is false are sanitised before
any log is taken, so arbitrary garbage in padded positions can neither
poison the value nor leak gradient.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, div, hardtanh, log, masked_mean, mul, sub
from .errors import ConfigError, DomainError

_PROB_EPS = 1e-12


def _mask_array(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    return np.broadcast_to(m, shape)


def msle_loss(pred: Tensor, true: np.ndarray, mask) -> Tensor:
    """Mean squared log error over masked cells: mean (ln pred - ln true)^2."""
    m = _mask_array(mask, pred.shape)
    true_arr = np.asarray(true, dtype=np.float64)
    if np.any((true_arr <= 0) & (m > 0)):
        raise DomainError("msle_loss() requires positive targets on masked cells")
    true_safe = np.where(m > 0, true_arr, 1.0)
    # Pin masked-out predictions to 1 so log() stays in domain there; the
    # multiply-by-mask keeps their gradient exactly zero.  The log of the
    # ratio (rather than the difference of logs) makes proportional
    # over/under-prediction penalties exactly symmetric in floating
    # point: pred = c*y and pred = y/c both reduce to log(c)^2.
    diff = log(div(add(mul(pred, m), 1.0 - m), true_safe))
    return masked_mean(mul(diff, diff), m)


def mse_loss(pred: Tensor, true: np.ndarray, mask) -> Tensor:
    """Mean squared error over masked cells."""
    m = _mask_array(mask, pred.shape)
    true_safe = np.where(m > 0, np.asarray(true, dtype=np.float64), 0.0)
    diff = sub(mul(pred, m), true_safe * m)
    return masked_mean(mul(diff, diff), m)


def mortality_loss(prob: Tensor, labels: np.ndarray, mask) -> Tensor:
    """Masked-mean binary cross-entropy.

    ``labels`` may be one value per stay ([B]) — it is broadcast across
    the hour axis, since the label is constant throughout a stay — or
    already cell-shaped.  Probabilities are clamped to
    [1e-12, 1 - 1e-12] so saturated predictions produce a large finite
    loss instead of log(0).
    """
    m = _mask_array(mask, prob.shape)
    lab = np.asarray(labels, dtype=np.float64)
    if lab.ndim == prob.ndim - 1:
        lab = lab[..., None]
    lab = np.broadcast_to(lab, prob.shape)
    p = hardtanh(prob, _PROB_EPS, 1.0 - _PROB_EPS)
    ll = add(mul(log(p), lab), mul(log(sub(1.0, p)), 1.0 - lab))
    return masked_mean(-ll, m)


def multitask_loss(los_loss: Tensor, mort_loss: Tensor, alpha: float) -> Tensor:
    """Joint objective: LoS loss plus alpha times the mortality loss."""
    if alpha < 0:
        raise ConfigError(f"mortality loss weight must be >= 0, got {alpha}")
    return add(los_loss, mul(float(alpha), mort_loss))
