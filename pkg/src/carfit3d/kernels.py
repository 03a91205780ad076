"""Backend selection for the hot kernels.

The compiled Cython module is used when it is importable; otherwise, or when
the environment variable ``CARFIT3D_PURE_PYTHON`` is set to ``1``, the NumPy
fallback is used. ``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("CARFIT3D_PURE_PYTHON", "") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _f64(a, ndim):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 5) if arr.size else arr.reshape(0, 5)
    return arr


def bev_intersection(a, b, impl=None):
    """Footprint intersection area; ``a`` and ``b`` are ``[cx, cy, l, w, yaw]``."""
    impl = impl or _impl
    return float(impl.bev_intersection(_f64(a, 1), _f64(b, 1)))


def bev_intersection_matrix(A, B, impl=None):
    impl = impl or _impl
    A = np.ascontiguousarray(np.reshape(A, (-1, 5)), dtype=np.float64)
    B = np.ascontiguousarray(np.reshape(B, (-1, 5)), dtype=np.float64)
    return impl.bev_intersection_matrix(A, B)


def min_z_in_footprints(points, footprints, impl=None):
    """Lowest z among ``points`` inside each footprint (``inf`` when empty)."""
    impl = impl or _impl
    pts = np.ascontiguousarray(np.reshape(points, (-1, 3)), dtype=np.float64)
    fps = np.ascontiguousarray(np.reshape(footprints, (-1, 5)), dtype=np.float64)
    return impl.min_z_in_footprints(pts, fps)


def score_boxes(points, boxes, maps, tags, occluded, beta, per_point=False, impl=None):
    """Score every box against every map, unflipped and flipped.

    ``boxes`` rows are ``[cx, cy, cz, h, l, w, yaw]``; ``maps``/``tags`` have
    shape ``(K, 8, 18, 10)``; ``occluded`` is ``(M, 4)`` over the world facets
    ``(+l, -l, +w, -w)``. Returns an ``(M, K, 2)`` array.
    """
    impl = impl or _impl
    pts = np.ascontiguousarray(np.reshape(points, (-1, 3)), dtype=np.float64)
    bx = np.ascontiguousarray(np.reshape(boxes, (-1, 7)), dtype=np.float64)
    mp = np.ascontiguousarray(maps, dtype=np.float64)
    tg = np.ascontiguousarray(tags, dtype=np.int8)
    oc = np.ascontiguousarray(np.reshape(occluded, (-1, 4)), dtype=np.uint8)
    return impl.score_boxes(pts, bx, mp, tg, oc, float(beta), bool(per_point))
