# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convex-quad clipping kernels (Sutherland-Hodgman).

Must stay semantically identical to ``_clip_py.py``: same winding
normalisation, same boundary convention (on-edge counts as inside),
same shoelace area.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef double _shoelace(double* xs, double* ys, int n) nogil:
    cdef double s = 0.0
    cdef int i, j
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        s += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * s


cdef double _quad_clip_area(double* ax, double* ay, double* bx, double* by) nogil:
    cdef double sax[4]
    cdef double say[4]
    cdef double sbx[4]
    cdef double sby[4]
    cdef double sx[16]
    cdef double sy[16]
    cdef double ox[16]
    cdef double oy[16]
    cdef int i, j, e, f, n, m
    cdef double cx1, cy1, ex, ey, px, py, qx, qy, side_p, side_q, t, area

    if _shoelace(ax, ay, 4) < 0.0:
        for i in range(4):
            sax[i] = ax[3 - i]
            say[i] = ay[3 - i]
    else:
        for i in range(4):
            sax[i] = ax[i]
            say[i] = ay[i]
    if _shoelace(bx, by, 4) < 0.0:
        for i in range(4):
            sbx[i] = bx[3 - i]
            sby[i] = by[3 - i]
    else:
        for i in range(4):
            sbx[i] = bx[i]
            sby[i] = by[i]

    n = 4
    for i in range(4):
        sx[i] = sax[i]
        sy[i] = say[i]

    for e in range(4):
        if n == 0:
            return 0.0
        cx1 = sbx[e]
        cy1 = sby[e]
        f = e + 1
        if f == 4:
            f = 0
        ex = sbx[f] - cx1
        ey = sby[f] - cy1

        m = 0
        for i in range(n):
            px = sx[i]
            py = sy[i]
            j = i + 1
            if j == n:
                j = 0
            qx = sx[j]
            qy = sy[j]
            side_p = ex * (py - cy1) - ey * (px - cx1)
            side_q = ex * (qy - cy1) - ey * (qx - cx1)
            if side_p >= 0.0:
                ox[m] = px
                oy[m] = py
                m += 1
                if side_q < 0.0:
                    t = side_p / (side_p - side_q)
                    ox[m] = px + t * (qx - px)
                    oy[m] = py + t * (qy - py)
                    m += 1
            elif side_q >= 0.0:
                t = side_p / (side_p - side_q)
                ox[m] = px + t * (qx - px)
                oy[m] = py + t * (qy - py)
                m += 1
        n = m
        for i in range(n):
            sx[i] = ox[i]
            sy[i] = oy[i]

    if n < 3:
        return 0.0
    area = _shoelace(sx, sy, n)
    return area if area > 0.0 else 0.0


def quad_area(quad):
    """Unsigned area of a planar quad given as a (4, 2) array."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = np.ascontiguousarray(quad, dtype=np.float64)
    cdef double xs[4]
    cdef double ys[4]
    cdef int i
    for i in range(4):
        xs[i] = q[i, 0]
        ys[i] = q[i, 1]
    cdef double a = _shoelace(xs, ys, 4)
    return abs(a)


def quad_intersection_area(quad_a, quad_b):
    """Intersection area of two convex quads, each a (4, 2) array.

    Degenerate (zero-area) quads yield 0.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(quad_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(quad_b, dtype=np.float64)
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef int i
    for i in range(4):
        ax[i] = a[i, 0]
        ay[i] = a[i, 1]
        bx[i] = b[i, 0]
        by[i] = b[i, 1]
    return _quad_clip_area(ax, ay, bx, by)


def quad_intersection_matrix(quads_a, quads_b):
    """Pairwise intersection areas: (N, 4, 2) x (M, 4, 2) -> (N, M)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] qa = np.ascontiguousarray(quads_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] qb = np.ascontiguousarray(quads_b, dtype=np.float64)
    cdef Py_ssize_t n = qa.shape[0]
    cdef Py_ssize_t m = qb.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef int k
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    for i in range(n):
        for k in range(4):
            ax[k] = qa[i, k, 0]
            ay[k] = qa[i, k, 1]
        for j in range(m):
            for k in range(4):
                bx[k] = qb[j, k, 0]
                by[k] = qb[j, k, 1]
            out[i, j] = _quad_clip_area(ax, ay, bx, by)
    return out
