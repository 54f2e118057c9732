"""Hourly resampling and forward-fill of raw event logs.

Hour t covers minute offsets ((t-1)*60, t*60]: an event at offset m
belongs to bucket ceil(m/60), so hour-t state never sees anything after
minute t*60.  Events at or before minute 0 (up to 24 h pre-admission)
collapse into an hour-0 seed that primes forward filling but is not
itself part of the stay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError

DECAY_BASE = 0.75
MIN_OFFSET_MINUTES = -1440.0
TIME_IN_ICU = "time_in_icu"
TIME_OF_DAY = "time_of_day"
CLOCK_FEATURES = (TIME_IN_ICU, TIME_OF_DAY)


@dataclass
class RawEvent:
    """One timestamped measurement from the source event log."""

    stay_id: int
    feature_name: str
    offset_minutes: float
    value: float


def resample_hourly(
    events,
    feature_names: list[str],
    n_hours: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Bucket events into an hourly grid of last-observed raw values.

    ``events`` is an iterable of (feature_name, offset_minutes, value).
    Returns ``(grid, seed)``: grid[f, t-1] holds the latest value in hour
    t (NaN when none), and seed[f] the latest at-or-pre-admission value
    (NaN when none).  Within a bucket the largest offset wins; equal
    offsets resolve to the later event in input order.  Events after the
    stay's final hour are dropped.
    """
    index = {name: i for i, name in enumerate(feature_names)}
    grid = np.full((len(feature_names), n_hours), np.nan)
    seed = np.full(len(feature_names), np.nan)
    grid_best = np.full((len(feature_names), n_hours), -np.inf)
    seed_best = np.full(len(feature_names), -np.inf)
    for name, offset, value in events:
        if name not in index:
            raise DatasetError(f"unknown feature name {name!r} in event log")
        offset = float(offset)
        if offset < MIN_OFFSET_MINUTES:
            raise DatasetError(
                f"event offset {offset} min for {name!r} precedes the "
                f"{-MIN_OFFSET_MINUTES:.0f}-minute pre-admission window"
            )
        f = index[name]
        if offset <= 0.0:
            if offset >= seed_best[f]:
                seed_best[f] = offset
                seed[f] = float(value)
            continue
        t = int(np.ceil(offset / 60.0))
        if t > n_hours:
            continue
        if offset >= grid_best[f, t - 1]:
            grid_best[f, t - 1] = offset
            grid[f, t - 1] = float(value)
    return grid, seed


def forward_fill_with_decay(
    grid: np.ndarray, seed: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Carry the last observation forward and track its staleness.

    Returns ``(values, decay)`` of the grid's shape: values[f, t] is the
    most recent observation at hour <= t (the pre-admission seed counts as
    hour 0), NaN where the feature has never been observed; decay[f, t] is
    0.75^j with j hours since that observation, 0 where never observed.
    """
    n_features, n_hours = grid.shape
    if seed is None:
        seed = np.full(n_features, np.nan)
    values = np.full_like(grid, np.nan)
    decay = np.zeros_like(grid)
    for f in range(n_features):
        current = seed[f]
        age = 0
        for t in range(n_hours):
            if not np.isnan(grid[f, t]):
                current = grid[f, t]
                age = 0
            else:
                age += 1
            if not np.isnan(current):
                values[f, t] = current
                decay[f, t] = DECAY_BASE**age
    return values, decay


def clock_feature_rows(admission_hour: int, n_hours: int) -> np.ndarray:
    """Raw values for the two always-observed clock rows.

    Row 0 is hours since admission (t = 1..n_hours); row 1 is the wall
    clock hour of day (admission_hour + t) mod 24.  Both are scaled with
    their own training percentiles downstream; their decay rows are
    identically 1.
    """
    hours = np.arange(1, n_hours + 1, dtype=np.float64)
    return np.stack([hours, np.mod(float(admission_hour) + hours, 24.0)])
