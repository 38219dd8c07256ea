"""Pure-Python fallback for the convex-quad clipping kernels.

Semantics (and operation order, so results agree to the last bit) match
the compiled extension in ``_clip.pyx``:

* winding of both quads is normalised to counter-clockwise,
* points exactly on a clip edge count as inside,
* the clipped polygon area comes from the shoelace formula.
"""

import numpy as np

BACKEND = "python"


def _shoelace(xs, ys, n):
    s = 0.0
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        s += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * s


def _quad_clip_area(ax, ay, bx, by):
    # Normalise both quads to CCW so "inside" is always the left side.
    if _shoelace(ax, ay, 4) < 0.0:
        ax = ax[::-1]
        ay = ay[::-1]
    if _shoelace(bx, by, 4) < 0.0:
        bx = bx[::-1]
        by = by[::-1]

    sx = list(ax)
    sy = list(ay)
    for e in range(4):
        if not sx:
            return 0.0
        cx1 = bx[e]
        cy1 = by[e]
        f = e + 1
        if f == 4:
            f = 0
        ex = bx[f] - cx1
        ey = by[f] - cy1

        ox = []
        oy = []
        n = len(sx)
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
                ox.append(px)
                oy.append(py)
                if side_q < 0.0:
                    t = side_p / (side_p - side_q)
                    ox.append(px + t * (qx - px))
                    oy.append(py + t * (qy - py))
            elif side_q >= 0.0:
                t = side_p / (side_p - side_q)
                ox.append(px + t * (qx - px))
                oy.append(py + t * (qy - py))
        sx = ox
        sy = oy

    if len(sx) < 3:
        return 0.0
    area = _shoelace(sx, sy, len(sx))
    return area if area > 0.0 else 0.0


def quad_area(quad):
    """Unsigned area of a planar quad given as a (4, 2) array."""
    q = np.asarray(quad, dtype=np.float64)
    a = _shoelace(q[:, 0].tolist(), q[:, 1].tolist(), 4)
    return abs(a)


def quad_intersection_area(quad_a, quad_b):
    """Intersection area of two convex quads, each a (4, 2) array.

    Degenerate (zero-area) quads yield 0.
    """
    a = np.asarray(quad_a, dtype=np.float64)
    b = np.asarray(quad_b, dtype=np.float64)
    return _quad_clip_area(
        a[:, 0].tolist(), a[:, 1].tolist(), b[:, 0].tolist(), b[:, 1].tolist()
    )


def quad_intersection_matrix(quads_a, quads_b):
    """Pairwise intersection areas: (N, 4, 2) x (M, 4, 2) -> (N, M)."""
    qa = np.asarray(quads_a, dtype=np.float64)
    qb = np.asarray(quads_b, dtype=np.float64)
    n = qa.shape[0]
    m = qb.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        axs = qa[i, :, 0].tolist()
        ays = qa[i, :, 1].tolist()
        for j in range(m):
            out[i, j] = _quad_clip_area(
                axs, ays, qb[j, :, 0].tolist(), qb[j, :, 1].tolist()
            )
    return out
