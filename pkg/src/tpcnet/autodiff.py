"""Reverse-mode automatic differentiation on float64 NumPy arrays.

The engine is deliberately small: a :class:`Tensor` wraps an ndarray, a
:class:`Graph` is a tape of operation records appended in execution order
(define-by-run, so the tape is already topologically sorted), and
:func:`backward` walks the tape once in reverse, accumulating gradients
into ``Tensor.grad``.  Operations executed while no graph is active are
computed normally but never recorded, which is how inference runs without
bookkeeping overhead.

Every operation consumes and produces float64; integer or float32 input
is converted on Tensor construction so gradient checks are never polluted
by low-precision arithmetic.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateMaskError,
    DimensionError,
    DomainError,
    GraphError,
    NormStateError,
)

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "hardtanh",
    "concat",
    "broadcast_repeat",
    "reshape",
    "take_slice",
    "masked_mean",
    "tensor_sum",
    "pointwise_linear",
    "grouped_causal_conv",
    "BatchNorm",
    "dropout",
]


class Tensor:
    """A float64 array plus a gradient slot.

    ``requires_grad`` marks leaves whose gradients the caller wants; the
    flag propagates to results of operations on them.  ``grad`` is filled
    by :func:`backward` and is always a dense array of the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class _Record:
    """One tape entry: the produced tensor, its inputs, and a pullback.

    ``pullback(grad_out)`` returns one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("out", "inputs", "pullback", "name")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], pullback: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.pullback = pullback
        self.name = name


_STACK = threading.local()


def _graph_stack() -> list:
    if not hasattr(_STACK, "graphs"):
        _STACK.graphs = []
    return _STACK.graphs


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Tape of recorded operations, used as a context manager.

    Records are appended in execution order, so each record's inputs are
    produced (or are leaves) before the record itself — the tape is its
    own topological order.  A graph can be consumed by :func:`backward`
    exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        if popped is not self:
            raise GraphError("graph context stack corrupted")

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [rec.name for rec in self._records]

    def _append(self, record: _Record) -> None:
        self._records.append(record)


def _record(name: str, out: Tensor, inputs: tuple[Tensor, ...], pullback: Callable) -> Tensor:
    graph = _active_graph()
    if graph is not None and out.requires_grad:
        graph._append(_Record(out, inputs, pullback, name))
    return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def backward(graph: Graph, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Run reverse-mode accumulation for ``loss`` over a recorded graph.

    Seeds d(loss)/d(loss) = 1, walks the tape in reverse exactly once, and
    accumulates into ``.grad`` of every requires_grad tensor touched by
    the graph.  ``params`` may list extra tensors whose gradients should
    exist (as zeros) even if they never entered the graph, so optimizers
    can treat disconnected parameters uniformly.
    """
    if graph._consumed:
        raise GraphError("backward() was already called on this graph")
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.data.shape}")
    graph._consumed = True

    touched: dict[int, Tensor] = {}
    for rec in graph._records:
        if rec.out.requires_grad:
            touched[id(rec.out)] = rec.out
        for t in rec.inputs:
            if t.requires_grad:
                touched[id(t)] = t
    for p in params:
        touched[id(p)] = p
    for t in touched.values():
        t.grad = np.zeros_like(t.data)
    if id(loss) not in touched:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)

    for rec in reversed(graph._records):
        grad_out = rec.out.grad
        if grad_out is None:
            continue
        grads = rec.pullback(grad_out)
        for tensor, grad in zip(rec.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pullback(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), pullback)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def pullback(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), pullback)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def pullback(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _record("mul", out, (a, b), pullback)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("div() by zero")
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def pullback(g):
        return (
            _unbroadcast(g / b_data, a_data.shape),
            _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape),
        )

    return _record("div", out, (a, b), pullback)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad)

    def pullback(g):
        return (-g,)

    return _record("neg", out, (a,), pullback)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    positive = x.data > 0

    def pullback(g):
        return (g * positive,)

    return _record("relu", out, (x,), pullback)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.data)
    out = Tensor(value, requires_grad=x.requires_grad)

    def pullback(g):
        return (g * value,)

    return _record("exp", out, (x,), pullback)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log() requires strictly positive input")
    value = np.log(x.data)
    out = Tensor(value, requires_grad=x.requires_grad)
    x_data = x.data

    def pullback(g):
        return (g / x_data,)

    return _record("log", out, (x,), pullback)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # Evaluate from the side that avoids overflowing exp().
    z = x.data
    value = np.empty_like(z)
    pos = z >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    value[~pos] = ez / (1.0 + ez)
    out = Tensor(value, requires_grad=x.requires_grad)

    def pullback(g):
        return (g * value * (1.0 - value),)

    return _record("sigmoid", out, (x,), pullback)


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    value = np.logaddexp(0.0, x.data)
    out = Tensor(value, requires_grad=x.requires_grad)
    z = x.data

    def pullback(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return _record("softplus", out, (x,), pullback)


def hardtanh(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient is zero outside the open interval."""
    if not low < high:
        raise DomainError(f"hardtanh bounds must satisfy low < high, got [{low}, {high}]")
    x = _as_tensor(x)
    out = Tensor(np.clip(x.data, low, high), requires_grad=x.requires_grad)
    interior = (x.data > low) & (x.data < high)

    def pullback(g):
        return (g * interior,)

    return _record("hardtanh", out, (x,), pullback)


# ---------------------------------------------------------------------------
# structural operations
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat() needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != ndim or [d for i, d in enumerate(other) if i != ax] != [
            d for i, d in enumerate(base) if i != ax
        ]:
            raise DimensionError(
                f"concat() shapes must match off the concat axis: {base} vs {other} on axis {ax}"
            )
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=ax),
        requires_grad=any(t.requires_grad for t in tensors),
    )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", out, tuple(tensors), pullback)


def broadcast_repeat(x: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``count`` copies of ``x``."""
    if count < 1:
        raise DimensionError(f"broadcast_repeat() count must be >= 1, got {count}")
    x = _as_tensor(x)
    out = Tensor(
        np.repeat(np.expand_dims(x.data, axis), count, axis=axis),
        requires_grad=x.requires_grad,
    )

    def pullback(g):
        return (g.sum(axis=axis),)

    return _record("broadcast_repeat", out, (x,), pullback)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; flatten is the special case of merging axes."""
    x = _as_tensor(x)
    old_shape = x.data.shape
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def pullback(g):
        return (g.reshape(old_shape),)

    return _record("reshape", out, (x,), pullback)


def take_slice(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing with gradient scatter-back."""
    x = _as_tensor(x)
    out = Tensor(x.data[index], requires_grad=x.requires_grad)
    full_shape = x.data.shape

    def pullback(g):
        buf = np.zeros(full_shape, dtype=np.float64)
        buf[index] = g
        return (buf,)

    return _record("take_slice", out, (x,), pullback)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over cells where mask is nonzero; returns a scalar tensor."""
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.data.shape:
        try:
            m = np.broadcast_to(m, x.data.shape).astype(np.float64)
        except ValueError as err:
            raise DimensionError(
                f"mask shape {mask.shape} does not broadcast to {x.data.shape}"
            ) from err
    denom = m.sum()
    if denom == 0:
        raise DegenerateMaskError("masked_mean() over an all-zero mask")
    out = Tensor((x.data * m).sum() / denom, requires_grad=x.requires_grad)

    def pullback(g):
        return (g * m / denom,)

    return _record("masked_mean", out, (x,), pullback)


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)
    shape = x.data.shape

    def pullback(g):
        return (np.broadcast_to(g, shape).astype(np.float64),)

    return _record("tensor_sum", out, (x,), pullback)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------


def pointwise_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-timestep affine map: out[..., z, t] = sum_p W[z, p] x[..., p, t] + b[z].

    ``x`` is [P, T] or [B, P, T]; the same weights apply independently at
    every timestep, so the operation cannot mix information across time.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"pointwise_linear() expects weight [Z, P] and bias [Z], got {weight.shape}, {bias.shape}"
        )
    if x.ndim not in (2, 3):
        raise DimensionError(f"pointwise_linear() input must be [P, T] or [B, P, T], got {x.shape}")
    z, p = weight.shape
    if x.shape[-2] != p:
        raise DimensionError(
            f"pointwise_linear() input has {x.shape[-2]} rows but weight expects {p}"
        )
    if bias.shape[0] != z:
        raise DimensionError(f"bias has {bias.shape[0]} entries but weight produces {z}")
    value = weight.data @ x.data + (
        bias.data[:, None] if x.ndim == 2 else bias.data[None, :, None]
    )
    out = Tensor(value, requires_grad=x.requires_grad or weight.requires_grad or bias.requires_grad)
    x_data, w_data = x.data, weight.data
    batched = x.ndim == 3

    def pullback(g):
        gx = w_data.T @ g
        if batched:
            gw = np.einsum("bzt,bpt->zp", g, x_data)
            gb = g.sum(axis=(0, 2))
        else:
            gw = g @ x_data.T
            gb = g.sum(axis=1)
        return gx, gw, gb

    return _record("pointwise_linear", out, (x, weight, bias), pullback)


def grouped_causal_conv(x: Tensor, filters: Tensor, dilation: int) -> Tensor:
    """Grouped dilated causal convolution.

    ``x`` is [G, C, T] or [B, G, C, T]; ``filters`` is [G, Y, C, k], or
    [1, Y, C, k] for a single bank shared by every group.  Each group g is
    convolved only with its own channels:

        out[g, y, t] = sum_{j=0..k-1} sum_c filters[g, y, c, j] * x[g, c, t - dilation*j]

    with zeros beyond the left edge (equivalently, a left padding of
    dilation*(k-1)), so output at time t never touches input after t.
    """
    x, filters = _as_tensor(x), _as_tensor(filters)
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise DimensionError(f"dilation must be a positive integer, got {dilation!r}")
    if filters.ndim != 4:
        raise DimensionError(f"filters must be [G, Y, C, k], got {filters.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [G, C, T] or [B, G, C, T], got {x.shape}")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    b, g, c, t = xb.shape
    gf, y, cf, k = filters.shape
    if k < 1:
        raise DimensionError(f"kernel size must be >= 1, got {k}")
    if cf != c:
        raise DimensionError(f"filters expect {cf} channels per group, input has {c}")
    if gf not in (1, g):
        raise DimensionError(f"filter bank covers {gf} groups, input has {g} (or use 1 for shared)")
    shared = gf == 1

    xc = np.ascontiguousarray(xb)
    fc = np.ascontiguousarray(filters.data)
    value = kernels.conv_forward(xc, fc, int(dilation))
    out = Tensor(value if batched else value[0], requires_grad=x.requires_grad or filters.requires_grad)

    def pullback(grad):
        gb = np.ascontiguousarray(grad if batched else grad[None])
        gx = kernels.conv_backward_input(gb, fc, int(dilation))
        gfil = kernels.conv_backward_filters(gb, xc, int(dilation), k, shared)
        return (gx if batched else gx[0]), gfil

    return _record("grouped_causal_conv", out, (x, filters), pullback)


# ---------------------------------------------------------------------------
# batch normalisation and dropout
# ---------------------------------------------------------------------------


class BatchNorm:
    """Per-channel batch normalisation over [B, C, T] with an optional
    validity mask of shape [B, T].

    Training mode normalises with masked batch statistics (biased
    variance) and updates running statistics (unbiased variance);
    evaluation mode applies the running statistics as a fixed per-channel
    affine map, which keeps the operation causal and deterministic.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.updates = 0

    def __call__(self, x: Tensor, mask: np.ndarray | None, training: bool) -> Tensor:
        x = _as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise DimensionError(
                f"batch norm over {self.channels} channels got input {x.shape}"
            )
        if training:
            return self._train_forward(x, mask)
        return self._eval_forward(x)

    def _train_forward(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, c, t = x.shape
        if mask is None:
            m = np.ones((b, 1, t), dtype=np.float64)
        else:
            m = np.asarray(mask, dtype=np.float64)
            if m.shape != (b, t):
                raise DimensionError(f"mask must be [B, T] = {(b, t)}, got {m.shape}")
            m = m[:, None, :]
        count = float(m.sum())
        if count == 0:
            raise DegenerateMaskError("batch norm over an all-invalid batch")
        mean = (x.data * m).sum(axis=(0, 2)) / count
        centered = x.data - mean[None, :, None]
        var = ((centered * centered) * m).sum(axis=(0, 2)) / count
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv[None, :, None]
        value = self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]
        out = Tensor(
            value,
            requires_grad=x.requires_grad or self.gamma.requires_grad or self.beta.requires_grad,
        )

        unbias = count / (count - 1.0) if count > 1 else 1.0
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * unbias
        self.updates += 1

        gamma_data = self.gamma.data

        def pullback(g):
            ggamma = (g * xhat).sum(axis=(0, 2))
            gbeta = g.sum(axis=(0, 2))
            mean_g = g.sum(axis=(0, 2)) / count
            mean_gx = (g * xhat).sum(axis=(0, 2)) / count
            gx = (gamma_data * inv)[None, :, None] * (
                g - m * (mean_g[None, :, None] + xhat * mean_gx[None, :, None])
            )
            return gx, ggamma, gbeta

        return _record("batch_norm", out, (x, self.gamma, self.beta), pullback)

    def _eval_forward(self, x: Tensor) -> Tensor:
        if self.updates == 0:
            raise NormStateError(
                "batch norm used in eval mode before any training update"
            )
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x.data - self.running_mean[None, :, None]) * inv[None, :, None]
        value = self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]
        out = Tensor(
            value,
            requires_grad=x.requires_grad or self.gamma.requires_grad or self.beta.requires_grad,
        )
        gamma_data = self.gamma.data

        def pullback(g):
            ggamma = (g * xhat).sum(axis=(0, 2))
            gbeta = g.sum(axis=(0, 2))
            gx = g * (gamma_data * inv)[None, :, None]
            return gx, ggamma, gbeta

        return _record("batch_norm", out, (x, self.gamma, self.beta), pullback)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "updates": np.array([self.updates], dtype=np.int64),
        }

    def load_state(self, running_mean: np.ndarray, running_var: np.ndarray, updates: int) -> None:
        self.running_mean = np.asarray(running_mean, dtype=np.float64).copy()
        self.running_var = np.asarray(running_var, dtype=np.float64).copy()
        self.updates = int(np.asarray(updates).ravel()[0])


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))
