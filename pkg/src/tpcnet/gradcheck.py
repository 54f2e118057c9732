"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Graph, Tensor, backward


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of ``f`` at ``point`` against
    central finite differences.

    ``f`` must map the tensor to a scalar tensor and be deterministic
    (re-evaluating at the same data must give the same value).  Returns
    the maximum over coordinates of

        |analytic - numeric| / max(1, |analytic|)

    so both absolute error on small gradients and relative error on large
    ones are bounded by the returned figure.
    """
    point.requires_grad = True
    with Graph() as graph:
        loss = f(point)
    backward(graph, loss, params=(point,))
    analytic = point.grad.copy().ravel()

    flat = point.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = float(f(point).data.item())
        flat[i] = saved - h
        down = float(f(point).data.item())
        flat[i] = saved
        numeric[i] = (up - down) / (2.0 * h)

    scale = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / scale)) if flat.size else 0.0
