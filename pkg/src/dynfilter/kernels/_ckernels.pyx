# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Every function mirrors one in ``_pykernels`` and must
round identically (same operation order, no FMA contraction)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


def bilinear_many(const double[:, ::1] field, const double[::1] xs, const double[::1] ys):
    cdef Py_ssize_t n = xs.shape[0], i
    cdef Py_ssize_t H = field.shape[0], W = field.shape[1]
    cdef Py_ssize_t x0, y0, x1, y1
    cdef double x, y, fx, fy, top, bot
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            x = xs[i]
            y = ys[i]
            if x < 0.0:
                x = 0.0
            elif x > W - 1:
                x = W - 1
            if y < 0.0:
                y = 0.0
            elif y > H - 1:
                y = H - 1
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            x1 = x0 + 1 if x0 + 1 < W else W - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            fx = x - x0
            fy = y - y0
            top = field[y0, x0] * (1.0 - fx) + field[y0, x1] * fx
            bot = field[y1, x0] * (1.0 - fx) + field[y1, x1] * fx
            o[i] = top * (1.0 - fy) + bot * fy
    return out


def edge_scores(const double[::1] us, const double[::1] vs, double width, double height,
                double m0, double m1):
    cdef Py_ssize_t n = us.shape[0], i
    cdef double d, e
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            d = us[i]
            e = vs[i]
            if e < d:
                d = e
            e = (width - 1.0) - us[i]
            if e < d:
                d = e
            e = (height - 1.0) - vs[i]
            if e < d:
                d = e
            if d < 0.0:
                d = 0.0
            if d <= m0:
                o[i] = 1.0
            elif d >= m1:
                o[i] = 0.0
            else:
                o[i] = (m1 - d) / (m1 - m0)
    return out


def plane_abs_distances(const double[:, ::1] P, double a, double b, double c, double d):
    cdef Py_ssize_t n = P.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = fabs(a * P[i, 0] + b * P[i, 1] + c * P[i, 2] + d)
    return out


def count_inliers(const double[:, ::1] P, double a, double b, double c, double d, double tau):
    cdef Py_ssize_t n = P.shape[0], i, count = 0
    with nogil:
        for i in range(n):
            if fabs(a * P[i, 0] + b * P[i, 1] + c * P[i, 2] + d) <= tau:
                count += 1
    return count


def neighbor_counts(const double[::1] us, const double[::1] vs, const unsigned char[::1] flags,
                    double radius):
    cdef Py_ssize_t n = us.shape[0], i, k
    cdef double du, dv, r2 = radius * radius
    cdef long long c
    out = np.zeros(n, dtype=np.int64)
    if n == 0:
        return out
    # flagged points sorted by u; each query scans only the u-window around it
    sel = np.flatnonzero(np.asarray(flags)).astype(np.intp)
    order = np.argsort(np.asarray(us)[sel], kind="stable")
    sel = np.ascontiguousarray(sel[order])
    su_arr = np.ascontiguousarray(np.asarray(us)[sel])
    pad = 1e-9 * (1.0 + np.abs(np.asarray(us)) + abs(radius))
    lo_arr = np.searchsorted(su_arr, np.asarray(us) - abs(radius) - pad, "left").astype(np.intp)
    hi_arr = np.searchsorted(su_arr, np.asarray(us) + abs(radius) + pad, "right").astype(np.intp)
    cdef const Py_ssize_t[::1] idx = sel
    cdef const Py_ssize_t[::1] lo = lo_arr
    cdef const Py_ssize_t[::1] hi = hi_arr
    cdef long long[::1] o = out
    with nogil:
        for i in range(n):
            c = 0
            for k in range(lo[i], hi[i]):
                if idx[k] == i:
                    continue
                du = us[idx[k]] - us[i]
                dv = vs[idx[k]] - vs[i]
                if du * du + dv * dv <= r2:
                    c += 1
            o[i] = c
    return out


def block_match(const double[:, ::1] prev, const double[:, ::1] nxt, Py_ssize_t cx, Py_ssize_t cy,
                Py_ssize_t patch, Py_ssize_t search):
    """Returns (dx, dy, ssd, flat) for the best integer shift of the patch at (cx, cy)."""
    cdef Py_ssize_t H = prev.shape[0], W = prev.shape[1]
    cdef Py_ssize_t dx, dy, i, j, bx = 0, by = 0
    cdef double s, diff, lo, hi, best = -1.0
    cdef long long bn = 0, nn
    cdef bint found = 0
    if cx < patch:
        cx = patch
    if cy < patch:
        cy = patch
    if cx > W - 1 - patch:
        cx = W - 1 - patch
    if cy > H - 1 - patch:
        cy = H - 1 - patch
    lo = prev[cy, cx]
    hi = lo
    with nogil:
        for i in range(-patch, patch + 1):
            for j in range(-patch, patch + 1):
                if prev[cy + i, cx + j] < lo:
                    lo = prev[cy + i, cx + j]
                if prev[cy + i, cx + j] > hi:
                    hi = prev[cy + i, cx + j]
    if hi == lo:
        return 0, 0, 0.0, True
    with nogil:
        for dy in range(-search, search + 1):
            if cy + dy - patch < 0 or cy + dy + patch > nxt.shape[0] - 1:
                continue
            for dx in range(-search, search + 1):
                if cx + dx - patch < 0 or cx + dx + patch > nxt.shape[1] - 1:
                    continue
                s = 0.0
                for i in range(-patch, patch + 1):
                    for j in range(-patch, patch + 1):
                        diff = nxt[cy + dy + i, cx + dx + j] - prev[cy + i, cx + j]
                        s += diff * diff
                nn = dx * dx + dy * dy
                if (not found or s < best or (s == best and (nn < bn or (nn == bn and (dx < bx or (dx == bx and dy < by)))))):
                    found = 1
                    best = s
                    bx = dx
                    by = dy
                    bn = nn
    if not found:
        return 0, 0, 0.0, True
    return int(bx), int(by), best, False
