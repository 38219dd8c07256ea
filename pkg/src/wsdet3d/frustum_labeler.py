"""Initial 3D labels from 2D boxes: frustum segmentation, RANSAC ground
removal, and a heuristic box fit (BEV convex hull + edge-aligned minimum
rectangle under a class-size prior).

Everything is deterministic given the config seed; per-object failures
are recorded as rejection reasons, never raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry3d as g3d
from .types import Box2D, Box3D, Calibration, FrameLabelSet, LabeledObject, PointCloud, Provenance

REASON_TOO_FEW = "too-few-points"
REASON_DEGENERATE = "degenerate-fit"
REASON_IMPLAUSIBLE = "implausible-dims"
REASONS = (REASON_TOO_FEW, REASON_DEGENERATE, REASON_IMPLAUSIBLE)

_VERTICAL_COS = math.cos(math.radians(30.0))


@dataclass(frozen=True)
class ClassPrior:
    """Admissible (h, w, l) ranges in meters for a fitted box."""

    h_range: tuple[float, float] = (1.2, 2.2)
    w_range: tuple[float, float] = (1.4, 2.0)
    l_range: tuple[float, float] = (3.0, 5.0)


@dataclass(frozen=True)
class FrustumConfig:
    margin: float = 2.0            # 2D box expansion, pixels
    n_min: int = 8
    ransac_iters: int = 100
    ransac_tol: float = 0.10       # plane inlier distance, meters
    min_inlier_frac: float = 0.10  # of segment points, to accept a plane
    min_ground_area: float = 12.0  # BEV hull area of plane inliers, m^2
    ground_band: float = 0.5       # plane must sit in the lower y-band
    cluster_cell: float = 0.2      # BEV grid size for cluster linking
    dim_slack: float = 0.15        # tolerance above prior maxima, meters
    outlier_budget: float = 0.05   # BEV containment allowance
    seed: int = 0
    priors: dict = field(default_factory=lambda: {"Car": ClassPrior()})
    default_prior: ClassPrior = ClassPrior()

    def prior_for(self, cls: str) -> ClassPrior:
        return self.priors.get(cls, self.default_prior)


@dataclass
class FrustumSegment:
    """Points of one frustum: indices into the frame's cloud."""

    box2d: Box2D
    indices: np.ndarray
    ground_removed: bool = False
    ground_plane: tuple[np.ndarray, float] | None = None  # (normal, d)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class FitOutcome:
    box: Box3D | None
    reason: str | None

    @property
    def ok(self) -> bool:
        return self.box is not None


@dataclass
class InitialLabelReport:
    frame_id: str
    attempted: int = 0
    fitted: int = 0
    rejections: dict = field(default_factory=lambda: {r: 0 for r in REASONS})

    def record(self, outcome: FitOutcome) -> None:
        self.attempted += 1
        if outcome.ok:
            self.fitted += 1
        else:
            self.rejections[outcome.reason] += 1

    def as_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "attempted": self.attempted,
            "fitted": self.fitted,
            "rejections": dict(self.rejections),
        }


def extract_frustum(cloud: PointCloud, box: Box2D, calib: Calibration,
                    margin: float = 2.0) -> FrustumSegment:
    """Indices of points projecting inside the margin-expanded box with
    positive depth."""
    if len(cloud) == 0:
        return FrustumSegment(box, np.zeros(0, dtype=np.int64))
    cam = calib.lidar_to_rect(cloud.xyz)
    uv, valid, _ = g3d.project_points(cam, calib)
    keep = (
        valid
        & (uv[:, 0] >= box.x1 - margin) & (uv[:, 0] <= box.x2 + margin)
        & (uv[:, 1] >= box.y1 - margin) & (uv[:, 1] <= box.y2 + margin)
    )
    return FrustumSegment(box, np.flatnonzero(keep))


def remove_ground(segment: FrustumSegment, cloud: PointCloud, calib: Calibration,
                  plane_tolerance: float = 0.10, config: FrustumConfig | None = None,
                  seed: int = 0) -> FrustumSegment:
    """RANSAC plane removal restricted to near-horizontal candidates that
    sit in the segment's lower vertical band. Returns the segment
    unchanged (flag False) when no acceptable plane exists."""
    config = config or FrustumConfig()
    if len(segment) < 3:
        return segment
    pts = calib.lidar_to_rect(cloud.xyz[segment.indices])
    n = len(pts)
    rng = np.random.default_rng(seed)
    y_min, y_max = pts[:, 1].min(), pts[:, 1].max()
    band = max(config.ground_band * (y_max - y_min), plane_tolerance)
    y_cut = y_max - band
    min_inliers = max(3, int(math.ceil(config.min_inlier_frac * n)))
    seed_inliers = max(3, min_inliers // 2)

    def plane_ok(mask):
        ys = pts[mask, 1]
        if ys.mean() < y_cut:
            return False
        # a tilted slab through an object sweeps a tall y-range; true
        # ground stays within a few tolerances of flat
        if ys.max() - ys.min() > 4.0 * plane_tolerance:
            return False
        # ground covers a large BEV region; the flat bottom ring of an
        # object never does (covered-cell area, not hull: rings are hollow)
        cell = 0.5
        ij = np.floor(pts[mask][:, [0, 2]] / cell).astype(np.int64)
        covered = len(np.unique(ij[:, 0] * 10_000_019 + ij[:, 1])) * cell * cell
        return covered >= config.min_ground_area

    def refine(mask, normal, d):
        """Least-squares refit on the inliers: a 3-point plane tilted by
        sample jitter misses far-away ground across a long frustum."""
        for _ in range(3):
            inl = pts[mask]
            centroid = inl.mean(axis=0)
            _, _, vt = np.linalg.svd(inl - centroid, full_matrices=False)
            n2 = vt[-1]
            if abs(n2[1]) < _VERTICAL_COS:
                break
            d2 = -float(n2 @ centroid)
            new_mask = np.abs(pts @ n2 + d2) <= plane_tolerance
            if not plane_ok(new_mask):
                break
            changed = not np.array_equal(new_mask, mask)
            mask, normal, d = new_mask, n2, d2
            if not changed:
                break
        return mask, normal, d

    # Ground is the lowest surface: draw candidate triples from the
    # low y-band so small ground fractions still get sampled.
    pool_cut = y_max - max(2.0 * plane_tolerance, 0.3 * (y_max - y_min))
    pool = np.flatnonzero(pts[:, 1] >= pool_cut)
    if len(pool) < 3:
        pool = np.arange(n)

    best = None
    for _ in range(config.ransac_iters):
        ids = pool[rng.choice(len(pool), size=3, replace=False)]
        p0, p1, p2 = pts[ids]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if abs(normal[1]) < _VERTICAL_COS:
            continue
        d = -float(normal @ p0)
        mask = np.abs(pts @ normal + d) <= plane_tolerance
        if int(mask.sum()) < seed_inliers or not plane_ok(mask):
            continue
        mask, normal, d = refine(mask, normal, d)
        count = int(mask.sum())
        if count < min_inliers:
            continue
        if best is None or count > best[0]:
            best = (count, mask, normal, d)
    if best is None:
        return segment
    _, mask, normal, d = best
    return FrustumSegment(
        box2d=segment.box2d,
        indices=segment.indices[~mask],
        ground_removed=True,
        ground_plane=(normal, d),
    )


def select_object_cluster(segment: FrustumSegment, cloud: PointCloud,
                          calib: Calibration,
                          config: FrustumConfig | None = None) -> FrustumSegment:
    """Keep only the BEV point cluster that best covers the source 2D box.

    A frustum sweeps up occluders, background objects, and clutter along
    the viewing cone; the object itself is the cluster whose projected
    extent matches the annotation. Clusters are 8-connected components
    on a BEV grid (single-linkage approximation), selection is by IoU of
    the cluster's projected AABB with the 2D box, ties by size.
    """
    config = config or FrustumConfig()
    if len(segment) == 0:
        return segment
    pts = calib.lidar_to_rect(cloud.xyz[segment.indices])
    cells = np.floor(pts[:, [0, 2]] / config.cluster_cell).astype(np.int64)
    order = {}
    for key in map(tuple, cells):
        if key not in order:
            order[key] = len(order)

    parent = list(range(len(order)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for key, i in order.items():
        for dx in (-1, 0, 1):
            for dz in (-1, 0, 1):
                j = order.get((key[0] + dx, key[1] + dz))
                if j is not None and j != i:
                    union(i, j)

    labels = np.array([find(order[tuple(c)]) for c in cells])
    uv, valid, _ = g3d.project_points(pts, calib)
    best = None
    for lab in np.unique(labels):
        member = labels == lab
        mu = uv[member & valid]
        if len(mu) == 0:
            continue
        try:
            ab = Box2D(mu[:, 0].min(), mu[:, 1].min(), mu[:, 0].max(), mu[:, 1].max())
        except Exception:
            continue
        cover = g3d.iou_2d(ab, segment.box2d)
        key = (cover, int(member.sum()))
        if best is None or key > best[0]:
            best = (key, member)
    if best is None:
        return segment
    return FrustumSegment(
        box2d=segment.box2d,
        indices=segment.indices[best[1]],
        ground_removed=segment.ground_removed,
        ground_plane=segment.ground_plane,
    )


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices (may be < 3 for
    degenerate input). Runs on plain tuples: called per RANSAC candidate,
    numpy row indexing is too slow here."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def half(seq):
        out = []
        for px, py in seq:
            while len(out) >= 2:
                ox, oy = out[-2]
                ax, ay = out[-1]
                if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) <= 0:
                    out.pop()
                else:
                    break
            out.append((px, py))
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def fit_box_heuristic(segment: FrustumSegment, cloud: PointCloud, calib: Calibration,
                      prior: ClassPrior | None = None,
                      config: FrustumConfig | None = None) -> FitOutcome:
    """Fit an oriented box to a ground-removed segment.

    Candidate rectangles come from every hull-edge direction; the
    smallest-area candidate compatible with the class prior wins. Height
    spans from the detected ground plane (when available) to the highest
    member point; heading points toward the camera hemisphere.
    """
    config = config or FrustumConfig()
    prior = prior or config.default_prior
    if len(segment) < config.n_min:
        return FitOutcome(None, REASON_TOO_FEW)
    pts = calib.lidar_to_rect(cloud.xyz[segment.indices])
    bev = pts[:, [0, 2]]
    hull = _convex_hull(bev)
    if len(hull) < 3 or _polygon_area(hull) < 1e-9:
        return FitOutcome(None, REASON_DEGENERATE)

    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2.0))

    feasible = None
    for cand in sorted(_candidates(bev, angles), key=lambda c: c[0]):
        area, theta, x0, x1, z0, z1, sx, sz = cand
        long_side, short_side = max(sx, sz), min(sx, sz)
        if long_side > prior.l_range[1] + config.dim_slack:
            continue
        if short_side > prior.w_range[1] + config.dim_slack:
            continue
        feasible = cand
        break
    if feasible is None:
        return FitOutcome(None, REASON_IMPLAUSIBLE)

    area, theta, x0, x1, z0, z1, sx, sz = feasible
    c, s = math.cos(theta), math.sin(theta)
    cx_r, cz_r = (x0 + x1) / 2.0, (z0 + z1) / 2.0
    cx = cx_r * c - cz_r * s
    cz = cx_r * s + cz_r * c

    if sx >= sz:
        long_dir = theta          # BEV angle of the length axis
        l_raw, w_raw = sx, sz
    else:
        long_dir = theta + math.pi / 2.0
        l_raw, w_raw = sz, sx
    l = min(max(l_raw, prior.l_range[0]), prior.l_range[1])
    w = min(max(w_raw, prior.w_range[0]), prior.w_range[1])

    # yaw: box length axis maps to BEV direction (cos yaw, -sin yaw)
    yaw = -long_dir
    heading = (math.cos(yaw), -math.sin(yaw))
    if heading[0] * cx + heading[1] * cz > 0.0:
        yaw += math.pi

    y_low = pts[:, 1].max()
    if segment.ground_plane is not None:
        normal, d = segment.ground_plane
        if abs(normal[1]) > 1e-6:
            y_low = -(d + normal[0] * cx + normal[2] * cz) / normal[1]
    h_raw = y_low - pts[:, 1].min()
    h = min(max(h_raw, prior.h_range[0]), prior.h_range[1])

    box = Box3D(location=(cx, float(y_low), cz), dims=(h, w, l), yaw=yaw)

    # Containment guard: clipping a too-long side down must not shed
    # more than the outlier budget.
    quad = g3d.bev_corners(box)
    d2 = bev - [cx, cz]
    cb, sb = math.cos(box.yaw), math.sin(box.yaw)
    lx = d2[:, 0] * cb - d2[:, 1] * sb
    lz = d2[:, 0] * sb + d2[:, 1] * cb
    inside = (np.abs(lx) <= l / 2 + 1e-6) & (np.abs(lz) <= w / 2 + 1e-6)
    if inside.mean() < 1.0 - config.outlier_budget:
        return FitOutcome(None, REASON_IMPLAUSIBLE)
    return FitOutcome(box, None)


def _candidates(bev: np.ndarray, angles: np.ndarray):
    for theta in angles:
        c, s = math.cos(theta), math.sin(theta)
        xr = bev[:, 0] * c + bev[:, 1] * s
        zr = -bev[:, 0] * s + bev[:, 1] * c
        sx = float(xr.max() - xr.min())
        sz = float(zr.max() - zr.min())
        yield (sx * sz, float(theta), float(xr.min()), float(xr.max()),
               float(zr.min()), float(zr.max()), sx, sz)


def label_frame(cloud: PointCloud, label2d: FrameLabelSet, calib: Calibration,
                config: FrustumConfig | None = None):
    """Run extract -> remove-ground -> fit per object. Objects whose fit
    fails carry 2D-only entries; nothing raises per-object."""
    config = config or FrustumConfig()
    report = InitialLabelReport(frame_id=label2d.frame_id)
    objects: list[LabeledObject] = []
    fit_index = 0
    for obj in label2d.objects:
        if obj.dontcare:
            objects.append(LabeledObject(
                cls=obj.cls, box2d=obj.box2d, box3d=None,
                truncation=obj.truncation, occlusion=obj.occlusion,
                alpha=obj.alpha, dontcare=True))
            continue
        seg = extract_frustum(cloud, obj.box2d, calib, margin=config.margin)
        seg = remove_ground(seg, cloud, calib, plane_tolerance=config.ransac_tol,
                            config=config, seed=config.seed + 7919 * fit_index)
        seg = select_object_cluster(seg, cloud, calib, config=config)
        outcome = fit_box_heuristic(seg, cloud, calib,
                                    prior=config.prior_for(obj.cls), config=config)
        report.record(outcome)
        fit_index += 1
        objects.append(LabeledObject(
            cls=obj.cls, box2d=obj.box2d, box3d=outcome.box,
            truncation=obj.truncation, occlusion=obj.occlusion))
    labels = FrameLabelSet(frame_id=label2d.frame_id, objects=objects,
                           provenance=Provenance.initial())
    return labels, report
