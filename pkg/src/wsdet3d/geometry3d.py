"""Box geometry: 3D corners, camera projection, projected AABBs,
axis-aligned and rotated IoU, GIoU with its analytic gradient.

Corner ordering is fixed: bottom face first, counter-clockwise when the
scene is viewed from above with +x right and +z up in the plot, then the
top face in matching order. Index 0 is the (+l/2, bottom, +w/2) corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import quad_area, quad_intersection_area, quad_intersection_matrix
from .types import Box2D, Box3D, Calibration

DEPTH_EPS = 1e-6
TIE_EPS = 1e-9

# Per-corner multipliers for (l/2, -h, w/2); bottom face then top face.
_SX = np.array([1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0])
_SY = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
_SZ = np.array([1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0])


class AllCornersBehindCamera(ValueError):
    """Every corner of the box projects with non-positive depth."""


class DegenerateHull(ValueError):
    """GIoU undefined: both boxes have zero area."""


@dataclass(frozen=True)
class OverlapReport:
    """Intersection/union/hull summary of a 2D box pair."""

    intersection: float
    union: float
    iou: float
    giou: float
    hull: float


@dataclass(frozen=True)
class GiouGradient:
    """GIoU of a projected box against a 2D target plus its gradient.

    ``grad`` orders the partials as (x, y, z, h, w, l, yaw).
    ``nondifferentiable`` flags a corner-selection tie (another corner
    within 1e-9 of a chosen min/max) whose competing corners disagree on
    the derivative; the returned gradient is then the one-sided
    derivative of the lowest-index tie-break.
    """

    giou: float
    grad: np.ndarray
    nondifferentiable: bool


def _relevant_tie(vals, grads, winner) -> bool:
    """A min/max tie matters only if a tied corner disagrees on the
    derivative. Zero-skew cameras project each top/bottom corner pair to
    the same u, so value-level ties are structural there and benign."""
    ref = grads[winner]
    scale = max(1.0, float(np.abs(ref).max()))
    for k in range(len(vals)):
        if k == winner or abs(vals[k] - vals[winner]) > TIE_EPS:
            continue
        if np.abs(grads[k] - ref).max() > TIE_EPS * scale:
            return True
    return False


def rotation_y(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def corners_3d(box: Box3D) -> np.ndarray:
    """Eight (x, y, z) corners in the camera frame, fixed ordering."""
    h, w, l = box.dims
    offsets = np.stack([_SX * (l / 2.0), _SY * (-h), _SZ * (w / 2.0)], axis=1)
    return offsets @ rotation_y(box.yaw).T + np.asarray(box.location)


def bev_corners(box: Box3D) -> np.ndarray:
    """Bottom-face footprint as a (4, 2) array of (x, z)."""
    return corners_3d(box)[:4][:, [0, 2]]


def project_points(points: np.ndarray, calib: Calibration):
    """Project camera-frame points to pixels.

    Returns ``(uv, valid, depth)`` where ``uv`` is (N, 2), ``depth`` the
    projective depth, and ``valid`` flags depth > 1e-6 m. Invalid points
    are projected anyway (never dropped), their uv is unreliable.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    p = calib.cam_projection
    nu = p[0, 0] * x + p[0, 1] * y + p[0, 2] * z + p[0, 3]
    nv = p[1, 0] * x + p[1, 1] * y + p[1, 2] * z + p[1, 3]
    d = p[2, 0] * x + p[2, 1] * y + p[2, 2] * z + p[2, 3]
    valid = d > DEPTH_EPS
    safe = np.where(d == 0.0, 1.0, d)
    uv = np.stack([nu / safe, nv / safe], axis=1)
    return uv, valid, d


def projected_aabb(box: Box3D, calib: Calibration,
                   clip: tuple[int, int] | None = None) -> Box2D:
    """Axis-aligned pixel box around the projected 3D corners.

    Corners behind the camera are dropped from the min/max; when all
    eight are behind, :class:`AllCornersBehindCamera` is raised.
    ``clip`` is an optional (H, W) image extent.
    """
    uv, valid, _ = project_points(corners_3d(box), calib)
    if not valid.any():
        raise AllCornersBehindCamera(f"box at {box.location} fully behind camera")
    u = uv[valid, 0]
    v = uv[valid, 1]
    x1, x2 = float(u.min()), float(u.max())
    y1, y2 = float(v.min()), float(v.max())
    if clip is not None:
        height, width = clip
        x1 = min(max(x1, 0.0), float(width))
        x2 = min(max(x2, 0.0), float(width))
        y1 = min(max(y1, 0.0), float(height))
        y2 = min(max(y2, 0.0), float(height))
    return Box2D(x1, y1, x2, y2, score=box.score)


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_2d(a: Box2D, b: Box2D) -> OverlapReport:
    """IoU and generalized IoU with the smallest enclosing AABB as hull."""
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if a.area == 0.0 and b.area == 0.0:
        raise DegenerateHull("both boxes have zero area")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = a.area + b.area - inter
    iou = inter / union if union > 0.0 else 0.0
    giou = iou - (hull - union) / hull
    return OverlapReport(inter, union, iou, giou, hull)


def _dmax(u: float, v: float) -> float:
    """d max(u, v) / du: ties split evenly so perfect overlap has zero grad."""
    if u > v:
        return 1.0
    if u == v:
        return 0.5
    return 0.0


def _dmin(u: float, v: float) -> float:
    if u < v:
        return 1.0
    if u == v:
        return 0.5
    return 0.0


def _giou_value_and_partials(a: tuple[float, float, float, float], b: Box2D):
    """GIoU of AABB ``a`` = (x1, y1, x2, y2) vs fixed box ``b`` plus
    d giou / d a as a (4,) array."""
    ax1, ay1, ax2, ay2 = a
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = b.area
    d_area = np.array([-(ay2 - ay1), -(ax2 - ax1), (ay2 - ay1), (ax2 - ax1)])

    ix1 = max(ax1, b.x1)
    iy1 = max(ay1, b.y1)
    ix2 = min(ax2, b.x2)
    iy2 = min(ay2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        d_inter = np.array([
            -_dmax(ax1, b.x1) * ih,
            -_dmax(ay1, b.y1) * iw,
            _dmin(ax2, b.x2) * ih,
            _dmin(ay2, b.y2) * iw,
        ])
    else:
        inter = 0.0
        d_inter = np.zeros(4)

    union = area_a + area_b - inter
    d_union = d_area - d_inter

    hw = max(ax2, b.x2) - min(ax1, b.x1)
    hh = max(ay2, b.y2) - min(ay1, b.y1)
    hull = hw * hh
    d_hull = np.array([
        -_dmin(ax1, b.x1) * hh,
        -_dmin(ay1, b.y1) * hw,
        _dmax(ax2, b.x2) * hh,
        _dmax(ay2, b.y2) * hw,
    ])

    if union <= 0.0 or hull <= 0.0:
        raise DegenerateHull("degenerate overlap configuration")

    giou = inter / union - (hull - union) / hull
    d_giou = (d_inter * union - inter * d_union) / union**2 \
        + (d_union * hull - union * d_hull) / hull**2
    return giou, d_giou


def _corner_jacobian(box: Box3D) -> np.ndarray:
    """d corner / d params as an (8, 3, 7) array; params (x,y,z,h,w,l,yaw)."""
    h, w, l = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox = _SX * (l / 2.0)
    oz = _SZ * (w / 2.0)
    jac = np.zeros((8, 3, 7))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    jac[:, 2, 2] = 1.0
    jac[:, 1, 3] = -_SY
    jac[:, 0, 4] = _SZ / 2.0 * s
    jac[:, 2, 4] = _SZ / 2.0 * c
    jac[:, 0, 5] = _SX / 2.0 * c
    jac[:, 2, 5] = -_SX / 2.0 * s
    jac[:, 0, 6] = -s * ox + c * oz
    jac[:, 2, 6] = -c * ox - s * oz
    return jac


def giou_gradient(box: Box3D, target: Box2D, calib: Calibration) -> GiouGradient:
    """Analytic gradient of giou(projected_aabb(box), target) w.r.t. the
    seven box parameters (x, y, z, h, w, l, yaw).

    Gradient flows through the projection and through the min/max corner
    selection; at corner-selection ties the lowest-index corner wins and
    the result is flagged ``nondifferentiable``.
    """
    corners = corners_3d(box)
    jac = _corner_jacobian(box)
    p = calib.cam_projection

    x, y, z = corners[:, 0], corners[:, 1], corners[:, 2]
    nu = p[0, 0] * x + p[0, 1] * y + p[0, 2] * z + p[0, 3]
    nv = p[1, 0] * x + p[1, 1] * y + p[1, 2] * z + p[1, 3]
    d = p[2, 0] * x + p[2, 1] * y + p[2, 2] * z + p[2, 3]
    valid = d > DEPTH_EPS
    if not valid.any():
        raise AllCornersBehindCamera(f"box at {box.location} fully behind camera")
    safe = np.where(valid, d, 1.0)
    u = nu / safe
    v = nv / safe

    # du/dcorner = (P0 * d - nu * P2) / d^2, per corner; then chain to params.
    du_dc = (p[0, :3][None, :] * safe[:, None] - nu[:, None] * p[2, :3][None, :]) / safe[:, None] ** 2
    dv_dc = (p[1, :3][None, :] * safe[:, None] - nv[:, None] * p[2, :3][None, :]) / safe[:, None] ** 2
    du_dp = np.einsum("kc,kcp->kp", du_dc, jac)
    dv_dp = np.einsum("kc,kcp->kp", dv_dc, jac)

    idx = np.flatnonzero(valid)
    uu, vv = u[idx], v[idx]

    def pick(vals, grads, extremum):
        k = int(np.argmin(vals) if extremum == "min" else np.argmax(vals))
        tied = _relevant_tie(vals, grads, k)
        return idx[k], float(vals[k]), tied

    k_x1, x1, t1 = pick(uu, du_dp[idx], "min")
    k_y1, y1, t2 = pick(vv, dv_dp[idx], "min")
    k_x2, x2, t3 = pick(uu, du_dp[idx], "max")
    k_y2, y2, t4 = pick(vv, dv_dp[idx], "max")
    tied = t1 or t2 or t3 or t4

    giou, d_aabb = _giou_value_and_partials((x1, y1, x2, y2), target)
    grad = (
        d_aabb[0] * du_dp[k_x1]
        + d_aabb[1] * dv_dp[k_y1]
        + d_aabb[2] * du_dp[k_x2]
        + d_aabb[3] * dv_dp[k_y2]
    )
    return GiouGradient(giou=float(giou), grad=grad, nondifferentiable=tied)


def _canonical_pair(a: Box3D, b: Box3D):
    """Order a box pair deterministically by footprint bytes so the
    clipping result (and thus IoU) is exactly symmetric in (a, b)."""
    qa = bev_corners(a)
    qb = bev_corners(b)
    if qb.tobytes() < qa.tobytes():
        return b, a, qb, qa
    return a, b, qa, qb


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of the two ground footprints."""
    _, _, qa, qb = _canonical_pair(a, b)
    inter = quad_intersection_area(qa, qb)
    union = quad_area(qa) + quad_area(qb) - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV polygon intersection x vertical overlap."""
    first, second, qa, qb = _canonical_pair(a, b)
    inter_bev = quad_intersection_area(qa, qb)
    y_ov = min(first.y_bottom, second.y_bottom) - max(first.y_top, second.y_top)
    if inter_bev <= 0.0 or y_ov <= 0.0:
        return 0.0
    inter = inter_bev * y_ov
    union = quad_area(qa) * first.h + quad_area(qb) * second.h - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix_2d(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise axis-aligned IoU for two Box2D sequences."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes_a])
    b = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes_b])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def iou_matrix_3d(boxes_a, boxes_b, kind: str = "3d") -> np.ndarray:
    """Pairwise rotated IoU for two Box3D sequences, ``kind`` in
    {"bev", "3d"}. Uses the batch clipping kernel."""
    if kind not in ("bev", "3d"):
        raise ValueError(f"unknown IoU kind {kind!r}")
    n, m = len(boxes_a), len(boxes_b)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    qa = np.stack([bev_corners(b) for b in boxes_a])
    qb = np.stack([bev_corners(b) for b in boxes_b])
    inter_bev = quad_intersection_matrix(qa, qb)
    area_a = np.array([quad_area(q) for q in qa])
    area_b = np.array([quad_area(q) for q in qb])
    if kind == "bev":
        union = area_a[:, None] + area_b[None, :] - inter_bev
        out = np.where(union > 0.0, inter_bev / np.where(union > 0.0, union, 1.0), 0.0)
        return np.clip(out, 0.0, 1.0)
    bot_a = np.array([b.y_bottom for b in boxes_a])
    top_a = np.array([b.y_top for b in boxes_a])
    bot_b = np.array([b.y_bottom for b in boxes_b])
    top_b = np.array([b.y_top for b in boxes_b])
    y_ov = np.clip(
        np.minimum(bot_a[:, None], bot_b[None, :]) - np.maximum(top_a[:, None], top_b[None, :]),
        0.0, None,
    )
    inter = inter_bev * y_ov
    vol_a = area_a * np.array([b.h for b in boxes_a])
    vol_b = area_b * np.array([b.h for b in boxes_b])
    union = vol_a[:, None] + vol_b[None, :] - inter
    out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)
