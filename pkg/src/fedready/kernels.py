"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy twin in ``_kernels_py`` is loaded. Set ``FEDREADY_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("FEDREADY_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward


def available_backends():
    """Map backend name to module for every backend importable here."""
    found = {"numpy": _kernels_py}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
