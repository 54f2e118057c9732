"""Pure-NumPy backend for the grouped dilated causal convolution.

All three entry points operate on batched arrays:

    x       [B, G, C, T]   per-group input channels
    filters [Gf, Y, C, k]  Gf == G, or Gf == 1 for a weight-shared bank
    output  [B, G, Y, T]

The convolution is causal with an implicit left padding of
``dilation * (k - 1)`` zeros:

    out[b, g, y, t] = sum_{j=0..k-1} sum_c filters[gf, y, c, j] * x[b, g, c, t - dilation*j]

where terms with a negative time index vanish and ``gf = 0`` when the
filter bank is shared across groups.

The forward pass uses a stride-tricks view of the padded input so the
whole contraction is a single einsum; the backward passes loop only over
the k filter taps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv_forward(x: np.ndarray, filters: np.ndarray, dilation: int) -> np.ndarray:
    """Causal grouped convolution; returns [B, G, Y, T]."""
    b, g, c, t = x.shape
    gf, y, cf, k = filters.shape
    pad = dilation * (k - 1)
    xp = np.zeros((b, g, c, t + pad), dtype=np.float64)
    xp[..., pad:] = x
    # view[b, g, c, a, t] = xp[b, g, c, t + dilation*a],  a = 0..k-1
    sb, sg, sc, st = xp.strides
    view = as_strided(
        xp,
        shape=(b, g, c, k, t),
        strides=(sb, sg, sc, dilation * st, st),
        writeable=False,
    )
    # x[t - dilation*j] == xp[t + dilation*(k-1-j)], so tap j pairs with
    # view slot a = k-1-j: contract against the reversed filters.
    frev = filters[..., ::-1]
    if gf == 1:
        return np.einsum("yca,bgcat->bgyt", frev[0], view, optimize=True)
    return np.einsum("gyca,bgcat->bgyt", frev, view, optimize=True)


def conv_backward_input(grad_out: np.ndarray, filters: np.ndarray, dilation: int) -> np.ndarray:
    """Gradient of the loss w.r.t. x, given grad_out [B, G, Y, T]."""
    b, g, y, t = grad_out.shape
    gf, yf, c, k = filters.shape
    gx = np.zeros((b, g, c, t), dtype=np.float64)
    for j in range(k):
        off = dilation * j
        if off >= t:
            break
        # out[t'] consumed x[t' - off]; scatter back along the tap.
        if gf == 1:
            contrib = np.einsum("yc,bgyt->bgct", filters[0, :, :, j], grad_out[..., off:])
        else:
            contrib = np.einsum("gyc,bgyt->bgct", filters[:, :, :, j], grad_out[..., off:])
        gx[..., : t - off] += contrib
    return gx


def conv_backward_filters(
    grad_out: np.ndarray, x: np.ndarray, dilation: int, k: int, shared: bool
) -> np.ndarray:
    """Gradient of the loss w.r.t. the filter bank.

    Returns [1, Y, C, k] when ``shared`` (summed over groups), else
    [G, Y, C, k].
    """
    b, g, y, t = grad_out.shape
    c = x.shape[2]
    out_shape = (1, y, c, k) if shared else (g, y, c, k)
    gf = np.zeros(out_shape, dtype=np.float64)
    for j in range(k):
        off = dilation * j
        if off >= t:
            break
        go = grad_out[..., off:]
        xs = x[..., : t - off]
        if shared:
            gf[0, :, :, j] = np.einsum("bgyt,bgct->yc", go, xs, optimize=True)
        else:
            gf[:, :, :, j] = np.einsum("bgyt,bgct->gyc", go, xs, optimize=True)
    return gf
