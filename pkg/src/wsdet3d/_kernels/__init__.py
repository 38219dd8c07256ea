"""Rotated-rectangle overlap kernels: compiled core with Python fallback.

The compiled Cython extension is preferred when it was built; otherwise
the pure-Python implementation takes over transparently. Set the
environment variable ``WSDET3D_PURE_PYTHON=1`` to force the fallback
(used by the benchmark and the backend-parity tests).
"""

import os

from . import _clip_py

if os.environ.get("WSDET3D_PURE_PYTHON"):
    _impl = _clip_py
else:
    try:
        from . import _clip as _impl
    except ImportError:
        _impl = _clip_py

BACKEND = _impl.BACKEND
quad_area = _impl.quad_area
quad_intersection_area = _impl.quad_intersection_area
quad_intersection_matrix = _impl.quad_intersection_matrix

__all__ = [
    "BACKEND",
    "quad_area",
    "quad_intersection_area",
    "quad_intersection_matrix",
]
