"""Backend selection for the grouped causal convolution kernels.

The compiled Cython extension is used when it imported cleanly; otherwise
the pure-NumPy reference implementation takes over.  Setting the
environment variable ``TPC_FORCE_REFERENCE=1`` forces the fallback, which
is what the benchmark script and the backend-equivalence tests use.
"""

from __future__ import annotations

import os

from . import reference

BACKEND = "reference"
_impl = reference

if os.environ.get("TPC_FORCE_REFERENCE", "") != "1":
    try:
        from . import _convo as _compiled

        _impl = _compiled
        BACKEND = "compiled"
    except ImportError:
        pass


def conv_forward(x, filters, dilation):
    return _impl.conv_forward(x, filters, dilation)


def conv_backward_input(grad_out, filters, dilation):
    return _impl.conv_backward_input(grad_out, filters, dilation)


def conv_backward_filters(grad_out, x, dilation, k, shared):
    return _impl.conv_backward_filters(grad_out, x, dilation, k, shared)
