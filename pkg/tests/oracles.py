"""Independent reference implementations used as test oracles.

Everything here is written in the most transparent way available —
explicit Python loops, textbook formulas — deliberately sharing no code
with the package, so agreement between the two is meaningful evidence.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def naive_causal_conv(x: np.ndarray, filters: np.ndarray, dilation: int) -> np.ndarray:
    """O(G*Y*C*k*T) loop version of the grouped dilated causal conv.

    x: [G, C, T]; filters: [Gf, Y, C, k] with Gf in {1, G}; returns [G, Y, T].
    """
    g, c, t = x.shape
    gf, y, _, k = filters.shape
    out = np.zeros((g, y, t))
    for gi in range(g):
        fg = 0 if gf == 1 else gi
        for yi in range(y):
            for ti in range(t):
                acc = 0.0
                for j in range(k):
                    tau = ti - dilation * j
                    if tau < 0:
                        continue
                    for ci in range(c):
                        acc += filters[fg, yi, ci, j] * x[gi, ci, tau]
                out[gi, yi, ti] = acc
    return out


def naive_pointwise(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Loop version of the per-timestep affine map. x: [P, T] -> [Z, T]."""
    p, t = x.shape
    z = w.shape[0]
    out = np.zeros((z, t))
    for zi in range(z):
        for ti in range(t):
            acc = b[zi]
            for pi in range(p):
                acc += w[zi, pi] * x[pi, ti]
            out[zi, ti] = acc
    return out


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def naive_msle(pred, true, mask):
    num, den = 0.0, 0
    for p, y, m in zip(np.ravel(pred), np.ravel(true), np.ravel(mask)):
        if m:
            num += (math.log(p) - math.log(y)) ** 2
            den += 1
    return num / den


def naive_mse(pred, true, mask):
    num, den = 0.0, 0
    for p, y, m in zip(np.ravel(pred), np.ravel(true), np.ravel(mask)):
        if m:
            num += (p - y) ** 2
            den += 1
    return num / den


def naive_mad(pred, true):
    return float(np.mean([abs(p - y) for p, y in zip(pred, true)]))


def naive_mape(pred, true, floor=4.0 / 24.0):
    return float(np.mean([abs(p - y) / max(y, floor) * 100.0 for p, y in zip(pred, true)]))


def naive_r2(pred, true):
    true = np.asarray(true, dtype=float)
    pred = np.asarray(pred, dtype=float)
    ss_res = float(((true - pred) ** 2).sum())
    ss_tot = float(((true - true.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot


DAY_BIN_EDGES = [0, 1, 2, 3, 4, 5, 6, 7, 8, 14]


def day_bin(value: float) -> int:
    """Bin index for remaining-stay days: [0,1), ..., [7,8), [8,14), [14, inf)."""
    for i in range(len(DAY_BIN_EDGES) - 1):
        if DAY_BIN_EDGES[i] <= value < DAY_BIN_EDGES[i + 1]:
            return i
    return len(DAY_BIN_EDGES) - 1


def naive_linear_kappa(pred, true):
    """Cohen's kappa with linear weights over the day bins, from scratch."""
    k = len(DAY_BIN_EDGES)  # 10 bins
    pi = [day_bin(v) for v in pred]
    ti = [day_bin(v) for v in true]
    n = len(pi)
    observed = np.zeros((k, k))
    for a, b in zip(pi, ti):
        observed[a, b] += 1.0 / n
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    weight = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            weight[i, j] = 1.0 - abs(i - j) / (k - 1)
    po = float((weight * observed).sum())
    pe = float((weight * np.outer(row, col)).sum())
    if pe == 1.0:
        return 0.0
    return (po - pe) / (1.0 - pe)


def naive_auroc(scores, labels):
    """Mann-Whitney formulation with tie-averaged ranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def naive_auprc(scores, labels):
    """Area under the precision-recall curve by step integration.

    Thresholds sweep the distinct scores from high to low; the area is
    sum over recall increments of precision at that threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    n_pos = int(labels.sum())
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            tp += int(labels[j] == 1)
            fp += int(labels[j] == 0)
            j += 1
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return area


def adam_first_step(grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Closed-form first Adam update for a fresh state."""
    g = np.asarray(grad, dtype=float)
    m = (1 - beta1) * g
    v = (1 - beta2) * g * g
    m_hat = m / (1 - beta1)
    v_hat = v / (1 - beta2)
    return -lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# dimension ledger
# ---------------------------------------------------------------------------


def ledger_channels_in(variant: str, n: int, y: int) -> int:
    """C^n: channels per feature entering layer n."""
    if n == 1:
        return 2
    if variant == "point_only":
        return 1
    if variant == "no_skip":
        return y
    return y + 1


def ledger_features_in(variant: str, n: int, f: int, z: int) -> int:
    """R^n: feature count entering layer n."""
    if variant in ("temp_only", "temp_only_ws"):
        return f
    return f + z * (n - 1)


def ledger_point_in(variant: str, n: int, f: int, s: int, z: int, y: int) -> int:
    """P^n: width of the pointwise input at layer n."""
    r = ledger_features_in(variant, n, f, z)
    c = ledger_channels_in(variant, n, y)
    width = r * c + s
    if variant != "no_decay":
        width += f
    return width


def ledger_head_in(variant: str, n_layers: int, f: int, s: int, z: int, y: int, d_embed: int) -> int:
    """B: width of the flattened input to the final head."""
    if variant in ("temp_only", "temp_only_ws"):
        feats, ch = f, y + 1
    elif variant == "point_only":
        feats, ch = f + z * n_layers, 1
    elif variant == "no_skip":
        feats, ch = f + z * n_layers, y
    else:
        feats, ch = f + z * n_layers, y + 1
    return feats * ch + s + d_embed


def ledger_param_count(
    variant: str,
    n_layers: int,
    f: int,
    s: int,
    z: int,
    y: int,
    k: int,
    x_hidden: int,
    d_diag: int,
    d_embed: int,
    batch_norm: bool,
    multitask: bool,
) -> int:
    """Closed-form count of learnable scalars for a variant build."""
    total = 0
    has_temp = variant != "point_only"
    has_point = variant not in ("temp_only", "temp_only_ws")
    shared = variant == "temp_only_ws"
    for n in range(1, n_layers + 1):
        r = ledger_features_in(variant, n, f, z)
        c = ledger_channels_in(variant, n, y)
        if has_temp:
            banks = 1 if shared else r
            total += banks * y * c * k  # filters
            if batch_norm:
                total += 2 * r * y  # gamma, beta over R*Y channels
        if has_point:
            p = ledger_point_in(variant, n, f, s, z, y)
            total += z * p + z  # weight, bias
            if batch_norm:
                total += 2 * z
    if d_diag > 0:
        total += d_embed * d_diag + d_embed
    b = ledger_head_in(variant, n_layers, f, s, z, y, d_embed if d_diag > 0 else 0)
    total += x_hidden * b + x_hidden  # hidden layer
    total += x_hidden + 1  # length-of-stay output row + bias
    if multitask:
        total += x_hidden + 1  # mortality output row + bias
    return total


# -- pipeline oracles ---------------------------------------------------------


def naive_resample(events, feature_names, n_hours):
    """Brute-force per-hour scan: for each (feature, hour) pick the event
    with the largest offset in ((t-1)*60, t*60]; offsets <= 0 feed a seed."""
    import numpy as np

    grid = np.full((len(feature_names), n_hours), np.nan)
    seed = np.full(len(feature_names), np.nan)
    for f, name in enumerate(feature_names):
        rows = [(o, v) for (n, o, v) in events if n == name]
        pre = [(o, i) for i, (o, _) in enumerate(rows) if o <= 0]
        if pre:
            best = max(pre)  # max offset, then latest input position
            seed[f] = rows[best[1]][1]
        for t in range(1, n_hours + 1):
            inside = [
                (o, i)
                for i, (o, _) in enumerate(rows)
                if (t - 1) * 60 < o <= t * 60
            ]
            if inside:
                best = max(inside)
                grid[f, t - 1] = rows[best[1]][1]
    return grid, seed


def naive_percentile(values, q):
    """Sort-and-index percentile with linear interpolation between order
    statistics (the numpy 'linear' definition, written out by hand)."""
    xs = sorted(values)
    if len(xs) == 1:
        return xs[0]
    pos = (q / 100.0) * (len(xs) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] * (1 - frac) + xs[hi] * frac


def sample_skewness(values):
    """Adjusted Fisher-Pearson sample skewness."""
    import numpy as np

    x = np.asarray(values, dtype=float)
    n = x.size
    m = x.mean()
    s = x.std(ddof=1)
    return (n / ((n - 1) * (n - 2))) * np.sum(((x - m) / s) ** 3)


def naive_cell_mape(yhat, y, floor_days=4.0 / 24.0):
    """Floor-modified MAPE written out pointwise for one grid cell."""
    import numpy as np

    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    terms = np.abs(y - yhat) / np.maximum(y, floor_days)
    return float(np.mean(terms) * 100.0)


def streaming_mean_median(values):
    """Independent mean/median: exactly-rounded sum and a hand-rolled
    sorted-middle median (even length averages the middle pair)."""
    import math

    xs = sorted(float(v) for v in values)
    n = len(xs)
    mean = math.fsum(xs) / n
    mid = n // 2
    median = xs[mid] if n % 2 == 1 else 0.5 * (xs[mid - 1] + xs[mid])
    return mean, median
