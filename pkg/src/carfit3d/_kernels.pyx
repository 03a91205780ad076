# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: footprint overlap, ground search and proposal scoring.

Every function here has a NumPy twin in ``_kernels_py`` with the same
signature and semantics; ``carfit3d.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, fabs, INFINITY

cnp.import_array()

DEF INSIDE_EPS = 1e-9
DEF AREA_EPS = 1e-12
DEF MAXV = 16


cdef inline void _rect(double cx, double cy, double l, double w, double yaw,
                       double* xs, double* ys) noexcept nogil:
    # CCW from above: (-l,-w), (+l,-w), (+l,+w), (-l,+w)
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    xs[0] = cx + c * (-hl) - s * (-hw); ys[0] = cy + s * (-hl) + c * (-hw)
    xs[1] = cx + c * hl - s * (-hw);    ys[1] = cy + s * hl + c * (-hw)
    xs[2] = cx + c * hl - s * hw;       ys[2] = cy + s * hl + c * hw
    xs[3] = cx + c * (-hl) - s * hw;    ys[3] = cy + s * (-hl) + c * hw


cdef inline int _clip(double* px, double* py, int n,
                      double ax, double ay, double bx, double by,
                      double* ox, double* oy) noexcept nogil:
    cdef int i, j, m = 0
    cdef double sc, sd, t
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        sc = (bx - ax) * (py[i] - ay) - (by - ay) * (px[i] - ax)
        sd = (bx - ax) * (py[j] - ay) - (by - ay) * (px[j] - ax)
        if sc >= 0.0:
            ox[m] = px[i]; oy[m] = py[i]; m += 1
            if sd < 0.0:
                t = sc / (sc - sd)
                ox[m] = px[i] + t * (px[j] - px[i]); oy[m] = py[i] + t * (py[j] - py[i]); m += 1
        elif sd >= 0.0:
            t = sc / (sc - sd)
            ox[m] = px[i] + t * (px[j] - px[i]); oy[m] = py[i] + t * (py[j] - py[i]); m += 1
    return m


cdef double _inter(const double* a, const double* b) noexcept nogil:
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef double px[MAXV]
    cdef double py[MAXV]
    cdef double qx[MAXV]
    cdef double qy[MAXV]
    cdef int n, k, i, j
    cdef double area
    _rect(a[0], a[1], a[2], a[3], a[4], ax, ay)
    _rect(b[0], b[1], b[2], b[3], b[4], bx, by)
    for i in range(4):
        px[i] = ax[i]; py[i] = ay[i]
    n = 4
    for k in range(4):
        j = k + 1
        if j == 4:
            j = 0
        n = _clip(px, py, n, bx[k], by[k], bx[j], by[j], qx, qy)
        if n == 0:
            return 0.0
        for i in range(n):
            px[i] = qx[i]; py[i] = qy[i]
    area = 0.0
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        area += px[i] * py[j] - px[j] * py[i]
    area = 0.5 * fabs(area)
    if area < AREA_EPS:
        return 0.0
    return area


def bev_intersection(const double[::1] a, const double[::1] b):
    return _inter(&a[0], &b[0])


def bev_intersection_matrix(const double[:, ::1] A, const double[:, ::1] B):
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    if n == 0 or m == 0:
        return out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _inter(&A[i, 0], &B[j, 0])
    return out


def min_z_in_footprints(const double[:, ::1] pts, const double[:, ::1] fps):
    cdef Py_ssize_t n = pts.shape[0], m = fps.shape[0], i, k
    out = np.full(m, np.inf, dtype=np.float64)
    cdef double[::1] o = out
    cdef double c, s, hl, hw, dx, dy, u, v, best
    with nogil:
        for k in range(m):
            c = cos(fps[k, 4]); s = sin(fps[k, 4])
            hl = 0.5 * fps[k, 2] + INSIDE_EPS
            hw = 0.5 * fps[k, 3] + INSIDE_EPS
            best = INFINITY
            for i in range(n):
                dx = pts[i, 0] - fps[k, 0]
                dy = pts[i, 1] - fps[k, 1]
                u = c * dx + s * dy
                if u > hl or u < -hl:
                    continue
                v = -s * dx + c * dy
                if v > hw or v < -hw:
                    continue
                if pts[i, 2] < best:
                    best = pts[i, 2]
            o[k] = best
    return out


cdef inline int _bin(double off, double extent, int n) noexcept nogil:
    cdef int i = <int>floor(off / extent * n)
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def score_boxes(const double[:, ::1] pts, const double[:, ::1] boxes,
                const double[:, :, :, ::1] maps, const signed char[:, :, :, ::1] tags,
                const unsigned char[:, ::1] occluded, double beta, bint per_point):
    cdef Py_ssize_t n = pts.shape[0], m = boxes.shape[0], kk = maps.shape[0]
    cdef int nh = maps.shape[1], nl = maps.shape[2], nw = maps.shape[3]
    out = np.zeros((m, kk, 2), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    counts_arr = np.zeros(nh * nl * nw, dtype=np.int32)
    touched_arr = np.zeros(nh * nl * nw, dtype=np.int32)
    cdef int[::1] counts = counts_arr
    cdef int[::1] touched = touched_arr
    cdef Py_ssize_t b, i, t, k
    cdef int ntouched, idx, ih, il, iw, flip, tag, facet
    cdef double cx, cy, cz, h, l, w, c, s, dx, dy, dz, u, v, val, total, weight
    with nogil:
        for b in range(m):
            cx = boxes[b, 0]; cy = boxes[b, 1]; cz = boxes[b, 2]
            h = boxes[b, 3]; l = boxes[b, 4]; w = boxes[b, 5]
            c = cos(boxes[b, 6]); s = sin(boxes[b, 6])
            ntouched = 0
            for i in range(n):
                dz = pts[i, 2] - cz
                if dz > 0.5 * h + INSIDE_EPS or dz < -0.5 * h - INSIDE_EPS:
                    continue
                dx = pts[i, 0] - cx
                dy = pts[i, 1] - cy
                u = c * dx + s * dy
                if u > 0.5 * l + INSIDE_EPS or u < -0.5 * l - INSIDE_EPS:
                    continue
                v = -s * dx + c * dy
                if v > 0.5 * w + INSIDE_EPS or v < -0.5 * w - INSIDE_EPS:
                    continue
                ih = _bin(dz + 0.5 * h, h, nh)
                il = _bin(u + 0.5 * l, l, nl)
                iw = _bin(v + 0.5 * w, w, nw)
                idx = (ih * nl + il) * nw + iw
                if counts[idx] == 0:
                    touched[ntouched] = idx
                    ntouched += 1
                counts[idx] += 1
            for k in range(kk):
                for flip in range(2):
                    total = 0.0
                    for t in range(ntouched):
                        idx = touched[t]
                        weight = counts[idx] if per_point else 1.0
                        iw = idx % nw
                        il = (idx // nw) % nl
                        ih = idx // (nw * nl)
                        if flip:
                            il = nl - 1 - il
                            iw = nw - 1 - iw
                        val = maps[k, ih, il, iw]
                        tag = tags[k, ih, il, iw]
                        if 1 <= tag <= 4:
                            facet = tag - 1
                            if flip:
                                facet = facet ^ 1
                            if occluded[b, facet]:
                                val = -beta
                        total += weight * val
                    o[b, k, flip] = total
            for t in range(ntouched):
                counts[touched[t]] = 0
    return out
