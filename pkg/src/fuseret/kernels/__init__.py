"""Convolution kernel backends, selected once at import.

The compiled extension (``fuseret.kernels._convnd``) is preferred when it was
built; otherwise the numpy im2col implementation in ``reference`` is used.
Set ``FUSERET_KERNELS=numpy`` or ``FUSERET_KERNELS=compiled`` to force a
backend (the latter raises if the extension is missing).

Both backends implement the identical six-function contract documented in
``reference`` and are cross-checked against each other and against a
nested-loop oracle in the test suite. ``python -m fuseret.kernels.benchmark``
compares their throughput.
"""

import os

from . import reference

_requested = os.environ.get("FUSERET_KERNELS", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError(f"FUSERET_KERNELS must be auto|compiled|numpy, got {_requested!r}")

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from . import _convnd as _impl
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = None
if _impl is None:
    _impl = reference

BACKEND = "numpy" if _impl is reference else "compiled"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_weight = _impl.conv3d_grad_weight

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_weight",
    "conv3d_forward",
    "conv3d_grad_input",
    "conv3d_grad_weight",
    "reference",
]
