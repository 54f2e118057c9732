"""Percentile-based feature scaling.

Continuous features are mapped linearly so that the training 5th
percentile lands on -1 and the 95th on +1, then clamped to [-4, 4] so a
single wild value cannot dominate an input row.  Binary and one-hot
features pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError

SCALE_CLAMP = 4.0
LOW_PERCENTILE = 5.0
HIGH_PERCENTILE = 95.0


@dataclass
class FeatureScale:
    """Training-split percentile boundaries for one continuous feature."""

    p5: float
    p95: float

    @property
    def degenerate(self) -> bool:
        return not self.p95 > self.p5

    def to_dict(self) -> dict:
        return {"p5": self.p5, "p95": self.p95}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScale":
        return cls(p5=float(d["p5"]), p95=float(d["p95"]))


def fit_feature_scale(values) -> FeatureScale:
    """Fit percentile boundaries on raw observed training values
    (linear interpolation between order statistics)."""
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        raise DatasetError("cannot fit a scale on zero observations")
    p5, p95 = np.percentile(arr, [LOW_PERCENTILE, HIGH_PERCENTILE])
    return FeatureScale(p5=float(p5), p95=float(p95))


def scale_value(v, scale: FeatureScale):
    """Map v so that [p5, p95] -> [-1, 1], clamped to [-4, 4].

    Degenerate scales (p95 == p5) map everything to 0.  Accepts scalars
    or arrays; NaNs pass through (unobserved cells are imputed later).
    """
    v = np.asarray(v, dtype=np.float64)
    if scale.degenerate:
        out = np.where(np.isnan(v), v, 0.0)
    else:
        out = np.clip(
            2.0 * (v - scale.p5) / (scale.p95 - scale.p5) - 1.0,
            -SCALE_CLAMP,
            SCALE_CLAMP,
        )
    return out if out.ndim else float(out)
