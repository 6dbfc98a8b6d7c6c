"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when importable, unless the environment
variable ``DYNFILTER_PURE_PYTHON`` is set to a non-empty value.
"""
import os

import numpy as np

from . import _pykernels as python

compiled = None
if not os.environ.get("DYNFILTER_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_many(field, xs, ys, impl=None):
    impl = impl or _impl
    return impl.bilinear_many(_f64(field), _f64(xs).ravel(), _f64(ys).ravel())


def edge_scores(us, vs, width, height, m0, m1, impl=None):
    impl = impl or _impl
    return impl.edge_scores(_f64(us).ravel(), _f64(vs).ravel(), float(width), float(height), float(m0), float(m1))


def plane_abs_distances(points, a, b, c, d, impl=None):
    impl = impl or _impl
    return impl.plane_abs_distances(_f64(points).reshape(-1, 3), float(a), float(b), float(c), float(d))


def count_inliers(points, a, b, c, d, tau, impl=None):
    impl = impl or _impl
    return int(impl.count_inliers(_f64(points).reshape(-1, 3), float(a), float(b), float(c), float(d), float(tau)))


def neighbor_counts(us, vs, flags, radius, impl=None):
    impl = impl or _impl
    flags = np.ascontiguousarray(flags, dtype=np.uint8).ravel()
    return impl.neighbor_counts(_f64(us).ravel(), _f64(vs).ravel(), flags, float(radius))


def block_match(prev, nxt, cx, cy, patch, search, impl=None):
    impl = impl or _impl
    return impl.block_match(_f64(prev), _f64(nxt), int(cx), int(cy), int(patch), int(search))


__all__ = [
    "BACKEND",
    "bilinear_many",
    "block_match",
    "compiled",
    "count_inliers",
    "edge_scores",
    "neighbor_counts",
    "plane_abs_distances",
    "python",
]
