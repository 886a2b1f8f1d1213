"""Kernel backend selection.

The hot inner loops (convolution taps, pooling windows) run through numba
``@njit`` when available. Set ``MASKEDNAS_BACKEND=numpy`` to force the
pure-numpy path, or ``MASKEDNAS_BACKEND=numba`` to fail loudly if numba is
missing. ``benchmarks/bench_kernels.py`` times both backends side by side.
"""

import os

from . import reference

BACKEND_ENV = "MASKEDNAS_BACKEND"

_requested = os.environ.get(BACKEND_ENV, "").strip().lower()

if _requested == "numpy":
    _impl = reference
    ACTIVE_BACKEND = "numpy"
elif _requested == "numba":
    from . import jitted as _impl
    ACTIVE_BACKEND = "numba"
else:
    try:
        from . import jitted as _impl
        ACTIVE_BACKEND = "numba"
    except ImportError:
        _impl = reference
        ACTIVE_BACKEND = "numpy"

conv2d_out_hw = reference.conv2d_out_hw
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
avgpool3_forward = _impl.avgpool3_forward
avgpool3_backward = _impl.avgpool3_backward
maxpool3_forward = _impl.maxpool3_forward
maxpool3_backward = _impl.maxpool3_backward
