"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``COVT_NUMBA=0`` in the environment to force the numpy path. The flag is
read once at import; :func:`use_backend` switches at runtime (tests, benchmarks).
"""
import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # numba missing
    _numba = None

_ENABLED = os.environ.get("COVT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
_impl = _numba if (_ENABLED and _numba is not None) else _numpy


def backend() -> str:
    return "numba" if _impl is _numba else "numpy"


def use_backend(name: str) -> None:
    global _impl
    if name == "numba":
        if _numba is None:
            raise RuntimeError("numba is not installed")
        _impl = _numba
    elif name == "numpy":
        _impl = _numpy
    else:
        raise ValueError(name)


def linear_assignment(cost):
    return _impl.linear_assignment(np.ascontiguousarray(cost, dtype=np.float64))


def pairwise_mask_cost(pred, gt, alpha=1.0, gamma=2.0, eps=1e-6, clamp=1e-7, symmetric=False):
    return _impl.pairwise_mask_cost(
        np.ascontiguousarray(pred, dtype=np.float64), np.ascontiguousarray(gt, dtype=np.float64),
        float(alpha), float(gamma), float(eps), float(clamp), bool(symmetric),
    )


def rasterize(kind, cy, cx, sy, sx, depth, intensity, height, width, bg_depth):
    arrs = [np.ascontiguousarray(a, dtype=np.float64) for a in (cy, cx, sy, sx, depth, intensity)]
    return _impl.rasterize(np.ascontiguousarray(kind, dtype=np.int64), *arrs,
                           int(height), int(width), float(bg_depth))


def label_boundaries(labels):
    return _impl.label_boundaries(np.ascontiguousarray(labels, dtype=np.int32))
