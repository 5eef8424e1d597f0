"""Hot inner loops: bilinear back-warping, correlation, column scatter.

The numba path is used when numba imports cleanly. Set
``LIDARFLOW_DISABLE_NUMBA=1`` to force the pure-numpy path (useful for
debugging and for comparing the two in ``benchmarks/bench_kernels.py``).
"""

import os

from . import _numpy

BACKEND = "numpy"

if os.environ.get("LIDARFLOW_DISABLE_NUMBA", "0").lower() in ("", "0", "false", "no"):
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is optional
        _impl = _numpy
else:
    _impl = _numpy

backwarp_forward = _impl.backwarp_forward
backwarp_backward = _impl.backwarp_backward
# numpy's sliced product already beats the compiled loop here (see the benchmark)
correlation_forward = _numpy.correlation_forward
correlation_backward = _impl.correlation_backward
col2im = _impl.col2im

__all__ = [
    "BACKEND",
    "backwarp_forward",
    "backwarp_backward",
    "correlation_forward",
    "correlation_backward",
    "col2im",
]
