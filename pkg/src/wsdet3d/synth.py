"""Synthetic KITTI-style scenes at desk scale.

Each scene is deterministic given its seed: car-like boxes placed on a
ground plane without BEV overlap, LiDAR returns sampled on box side
faces plus ground grid plus uniform clutter, 2D ground-truth boxes
derived by projecting 3D corners (optional pixel jitter emulates
detector noise), and per-box foreground masks from the projected
surface-point footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry3d as g3d
from ._kernels import quad_intersection_area
from .kitti_io import KittiSplit, write_calibration, write_label_file, write_mask, write_point_cloud
from .types import (
    Box2D,
    Box3D,
    Calibration,
    FrameLabelSet,
    LabeledObject,
    PointCloud,
    Provenance,
    SyntheticScene,
)

GROUND_SOURCE = -1
CLUTTER_SOURCE = -2


class ConfigInfeasible(ValueError):
    """The box sampler could not satisfy the placement constraints."""


@dataclass(frozen=True)
class ClassSpec:
    """Sampling ranges (meters) for one object class."""

    h_range: tuple[float, float] = (1.35, 1.75)
    w_range: tuple[float, float] = (1.50, 1.90)
    l_range: tuple[float, float] = (3.30, 4.60)


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the synthetic scene generator."""

    n_objects: tuple[int, int] = (3, 7)
    extent: tuple[int, int] = (375, 1242)  # (H, W) pixels
    focal: float = 700.0
    classes: dict = field(default_factory=lambda: {"Car": ClassSpec()})
    z_range: tuple[float, float] = (8.0, 40.0)
    ground_y: float = 1.65
    ground_clearance: float = 0.25  # lowest bodywork sample above ground
    bev_margin: float = 0.6
    max_place_attempts: int = 1000
    # point sampling
    surface_density: float = 50.0  # points per m^2 at 10 m, 1/z falloff
    include_top_face: bool = False
    point_noise: float = 0.0      # Gaussian sigma on xyz, meters
    dropout: float = 0.0          # fraction of surface points dropped
    drop_face_prob: float = 0.0   # chance to drop an entire side face
    max_points_per_box: int | None = None
    min_points_per_box: int = 12
    # 2D annotation noise
    pixel_jitter: float = 0.0
    # background
    ground_step: float = 0.45
    ground_jitter: float = 0.08
    ground_x_range: tuple[float, float] = (-16.0, 16.0)
    ground_z_range: tuple[float, float] = (4.0, 46.0)
    clutter_count: int = 250

    def noisy(self, level: float) -> "SceneConfig":
        """Scaled-noise variant used for degradation sweeps."""
        return replace(
            self,
            point_noise=0.08 * level,
            dropout=min(0.5, 0.18 * level),
            drop_face_prob=min(0.6, 0.22 * level),
            pixel_jitter=1.5 * level,
        )


def make_calibration(config: SceneConfig) -> Calibration:
    h, w = config.extent
    f = config.focal
    p = np.array([[f, 0.0, w / 2.0, 0.0],
                  [0.0, f, h / 2.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    th = math.radians(0.4)
    r0 = np.array([[math.cos(th), -math.sin(th), 0.0],
                   [math.sin(th), math.cos(th), 0.0],
                   [0.0, 0.0, 1.0]])
    tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, -0.08],
                   [1.0, 0.0, 0.0, -0.27]])
    return Calibration(p, r0, tr)


def _any_corner_visible(box: Box3D, calib: Calibration, extent) -> bool:
    uv, valid, _ = g3d.project_points(g3d.corners_3d(box), calib)
    h, w = extent
    ok = valid & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return bool(ok.any())


def _inflated_footprint(box: Box3D, margin: float) -> np.ndarray:
    grown = Box3D(box.location, (box.h, box.w + margin, box.l + margin), box.yaw)
    return g3d.bev_corners(grown)


def _place_boxes(rng, config: SceneConfig, calib: Calibration):
    n_target = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    boxes: list[Box3D] = []
    classes: list[str] = []
    footprints: list[np.ndarray] = []
    attempts = 0
    class_names = sorted(config.classes)
    while len(boxes) < n_target:
        if attempts >= config.max_place_attempts:
            raise ConfigInfeasible(
                f"placed {len(boxes)}/{n_target} boxes in {attempts} attempts")
        attempts += 1
        cls = class_names[int(rng.integers(len(class_names)))]
        spec = config.classes[cls]
        z = rng.uniform(*config.z_range)
        half_span = z * (config.extent[1] / 2.0) / config.focal
        x = rng.uniform(-0.85 * half_span, 0.85 * half_span)
        box = Box3D(
            location=(x, config.ground_y, z),
            dims=(rng.uniform(*spec.h_range), rng.uniform(*spec.w_range),
                  rng.uniform(*spec.l_range)),
            yaw=rng.uniform(-math.pi, math.pi),
        )
        if not _any_corner_visible(box, calib, config.extent):
            continue
        fp = _inflated_footprint(box, config.bev_margin)
        if any(quad_intersection_area(fp, other) > 0.0 for other in footprints):
            continue
        boxes.append(box)
        classes.append(cls)
        footprints.append(fp)
    return boxes, classes


def _sample_surface_points(rng, box: Box3D, config: SceneConfig) -> np.ndarray:
    """Sample LiDAR-style returns on the box faces (camera frame)."""
    h, w, l = box.dims
    z = box.location[2]
    inset = 1e-3
    # local-frame faces: x = +-l/2 and z = +-w/2 (side walls), y in [-h, 0]
    faces = [
        ("x", l / 2.0 - inset, w - 2 * inset, w * h),
        ("x", -l / 2.0 + inset, w - 2 * inset, w * h),
        ("z", w / 2.0 - inset, l - 2 * inset, l * h),
        ("z", -w / 2.0 + inset, l - 2 * inset, l * h),
    ]
    if config.include_top_face:
        faces.append(("y", -h + inset, 0.0, w * l))
    b_low = min(max(config.ground_clearance / h, 0.0), 0.45)
    pts_local = []
    for axis, offset, span, area in faces:
        n = max(2, int(round(area * config.surface_density * 10.0 / z)))
        if config.drop_face_prob > 0.0 and rng.uniform() < config.drop_face_prob:
            n = 0
        if n == 0:
            continue
        a = rng.uniform(-0.5, 0.5, size=n)
        b = rng.uniform(b_low, 1.0 - inset, size=n)
        if axis == "x":
            pts = np.stack([np.full(n, offset), -b * h, a * span], axis=1)
        elif axis == "z":
            pts = np.stack([a * span, -b * h, np.full(n, offset)], axis=1)
        else:  # top face
            pts = np.stack([rng.uniform(-0.5, 0.5, n) * (l - 2 * inset),
                            np.full(n, offset),
                            rng.uniform(-0.5, 0.5, n) * (w - 2 * inset)], axis=1)
        pts_local.append(pts)
    local = np.vstack(pts_local) if pts_local else np.zeros((0, 3))
    if config.dropout > 0.0 and len(local):
        keep = rng.uniform(size=len(local)) >= config.dropout
        local = local[keep]
    if len(local) < config.min_points_per_box:
        extra = config.min_points_per_box - len(local)
        a = rng.uniform(-0.5, 0.5, size=extra)
        b = rng.uniform(b_low, 1.0 - inset, size=extra)
        side = np.where(rng.uniform(size=extra) < 0.5, w / 2.0 - inset, -w / 2.0 + inset)
        local = np.vstack([local, np.stack([a * (l - 2 * inset), -b * h, side], axis=1)])
    if config.max_points_per_box is not None and len(local) > config.max_points_per_box:
        sel = rng.choice(len(local), size=config.max_points_per_box, replace=False)
        local = local[np.sort(sel)]
    cam = local @ g3d.rotation_y(box.yaw).T + np.asarray(box.location)
    if config.point_noise > 0.0 and len(cam):
        cam = cam + rng.normal(0.0, config.point_noise, size=cam.shape)
    return cam


def _ground_points(rng, config: SceneConfig) -> np.ndarray:
    xs = np.arange(config.ground_x_range[0], config.ground_x_range[1], config.ground_step)
    zs = np.arange(config.ground_z_range[0], config.ground_z_range[1], config.ground_step)
    gx, gz = np.meshgrid(xs, zs)
    pts = np.stack([gx.ravel(), np.full(gx.size, config.ground_y), gz.ravel()], axis=1)
    pts = pts + rng.normal(0.0, config.ground_jitter, size=pts.shape) * [1.0, 0.25, 1.0]
    return pts


def _clutter_points(rng, config: SceneConfig) -> np.ndarray:
    n = config.clutter_count
    if n == 0:
        return np.zeros((0, 3))
    x = rng.uniform(config.ground_x_range[0], config.ground_x_range[1], n)
    y = rng.uniform(-1.5, config.ground_y - 0.05, n)
    z = rng.uniform(config.ground_z_range[0], config.ground_z_range[1], n)
    return np.stack([x, y, z], axis=1)


def _bev_blockers(boxes: list[Box3D], index: int) -> int:
    """Count boxes whose footprint blocks the camera->centre BEV ray."""
    target = boxes[index]
    cx, cz = target.location[0], target.location[2]
    samples = np.linspace(0.05, 0.95, 24)
    ray = np.stack([samples * cx, samples * cz], axis=1)
    blockers = 0
    for j, other in enumerate(boxes):
        if j == index or other.location[2] >= target.location[2]:
            continue
        d = ray - [other.location[0], other.location[2]]
        c, s = math.cos(other.yaw), math.sin(other.yaw)
        lx = d[:, 0] * c - d[:, 1] * s
        lz = d[:, 0] * s + d[:, 1] * c
        if ((np.abs(lx) <= other.l / 2) & (np.abs(lz) <= other.w / 2)).any():
            blockers += 1
    return blockers


def _project_footprint_mask(uv: np.ndarray, box2d: Box2D, extent) -> np.ndarray:
    """Binary mask over the box footprint from projected point pixels,
    dilated by one pixel, clipped to the box."""
    y0, y1, x0, x1 = _footprint_bounds(box2d, extent)
    mask = np.zeros((max(y1 - y0, 0), max(x1 - x0, 0)), dtype=np.uint8)
    if mask.size == 0 or len(uv) == 0:
        return mask
    cols = np.floor(uv[:, 0]).astype(int) - x0
    rows = np.floor(uv[:, 1]).astype(int) - y0
    ok = (cols >= 0) & (cols < mask.shape[1]) & (rows >= 0) & (rows < mask.shape[0])
    mask[rows[ok], cols[ok]] = 1
    if mask.any():
        padded = np.pad(mask, 1)
        dil = np.zeros_like(mask)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                dil |= padded[1 + dr:1 + dr + mask.shape[0], 1 + dc:1 + dc + mask.shape[1]]
        mask = dil
    return mask


def _footprint_bounds(box2d: Box2D, extent) -> tuple[int, int, int, int]:
    """Integer pixel bounds (y0, y1, x0, x1) of a box, clipped to extent."""
    h, w = extent
    x0 = max(int(math.floor(box2d.x1)), 0)
    y0 = max(int(math.floor(box2d.y1)), 0)
    x1 = min(int(math.ceil(box2d.x2)), w)
    y1 = min(int(math.ceil(box2d.y2)), h)
    return y0, max(y1, y0), x0, max(x1, x0)


def generate_synthetic_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Build one deterministic scene from a seed."""
    config = config or SceneConfig()
    if config.n_objects[0] > config.n_objects[1] or config.n_objects[0] < 0:
        raise ConfigInfeasible(f"bad object count range {config.n_objects}")
    if config.extent[0] <= 0 or config.extent[1] <= 0:
        raise ConfigInfeasible(f"bad image extent {config.extent}")
    rng = np.random.default_rng(seed)
    calib = make_calibration(config)
    boxes, classes = _place_boxes(rng, config, calib)

    cam_chunks: list[np.ndarray] = []
    sources: list[np.ndarray] = []
    refl: list[np.ndarray] = []
    per_box_cam: list[np.ndarray] = []
    for i, box in enumerate(boxes):
        pts = _sample_surface_points(rng, box, config)
        per_box_cam.append(pts)
        cam_chunks.append(pts)
        sources.append(np.full(len(pts), i, dtype=np.int32))
        refl.append(rng.uniform(0.55, 0.95, len(pts)))
    ground = _ground_points(rng, config)
    cam_chunks.append(ground)
    sources.append(np.full(len(ground), GROUND_SOURCE, dtype=np.int32))
    refl.append(rng.uniform(0.05, 0.30, len(ground)))
    clutter = _clutter_points(rng, config)
    cam_chunks.append(clutter)
    sources.append(np.full(len(clutter), CLUTTER_SOURCE, dtype=np.int32))
    refl.append(rng.uniform(0.0, 1.0, len(clutter)))

    cam_all = np.vstack(cam_chunks) if cam_chunks else np.zeros((0, 3))
    point_sources = np.concatenate(sources) if sources else np.zeros(0, dtype=np.int32)
    reflectance = np.concatenate(refl) if refl else np.zeros(0)
    lidar = calib.rect_to_lidar(cam_all) if len(cam_all) else np.zeros((0, 3))
    cloud = PointCloud(np.hstack([lidar, reflectance[:, None]]).astype(np.float32))

    h_img, w_img = config.extent
    objects: list[LabeledObject] = []
    masks: list[np.ndarray] = []
    for i, box in enumerate(boxes):
        raw = g3d.projected_aabb(box, calib)
        clipped = g3d.projected_aabb(box, calib, clip=config.extent)
        if config.pixel_jitter > 0.0:
            j = rng.normal(0.0, config.pixel_jitter, size=4)
            x1 = min(max(raw.x1 + j[0], 0.0), float(w_img))
            y1 = min(max(raw.y1 + j[1], 0.0), float(h_img))
            x2 = min(max(raw.x2 + j[2], 0.0), float(w_img))
            y2 = min(max(raw.y2 + j[3], 0.0), float(h_img))
            box2d = Box2D(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))
        else:
            box2d = Box2D(clipped.x1, clipped.y1, clipped.x2, clipped.y2)
        truncation = 0.0
        if raw.area > 0.0:
            truncation = min(max(1.0 - clipped.area / raw.area, 0.0), 1.0)
        occlusion = min(_bev_blockers(boxes, i), 2)
        uv, valid, _ = g3d.project_points(per_box_cam[i], calib)
        masks.append(_project_footprint_mask(uv[valid], box2d, config.extent))
        x, _, z = box.location
        objects.append(LabeledObject(
            cls=classes[i], box2d=box2d, box3d=box,
            truncation=truncation, occlusion=occlusion,
            alpha=box.yaw - math.atan2(x, z)))

    frame_id = f"{seed:06d}"
    gt = FrameLabelSet(frame_id=frame_id, objects=objects,
                       provenance=Provenance.ground_truth())
    return SyntheticScene(
        frame_id=frame_id, gt=gt, cloud=cloud, calib=calib,
        extent=config.extent, masks=masks, point_sources=point_sources,
        ground_y=config.ground_y)


def merged_mask(scene: SyntheticScene) -> np.ndarray:
    """Frame-level foreground raster: pixelwise max of per-box masks."""
    out = np.zeros(scene.extent, dtype=np.uint8)
    for obj, mask in zip(scene.gt.objects, scene.masks):
        y0, y1, x0, x1 = _footprint_bounds(obj.box2d, scene.extent)
        region = out[y0:y0 + mask.shape[0], x0:x0 + mask.shape[1]]
        np.maximum(region, mask[:region.shape[0], :region.shape[1]], out=region)
    return out


def simulate_detector2d_scores(labels: FrameLabelSet, seed: int) -> list[float]:
    """Stand-in for reading a 2D detector's heatmap confidence at each
    annotation centre: high when unoccluded, degraded by occlusion and
    truncation, small deterministic noise."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD27)))
    scores = []
    for obj in labels.objects:
        base = 0.93 - 0.10 * obj.occlusion - 0.45 * max(obj.truncation, 0.0)
        scores.append(float(np.clip(base + rng.normal(0.0, 0.03), 0.05, 0.995)))
    return scores


def write_scene(scene: SyntheticScene, split: KittiSplit) -> None:
    """Write one scene into the KITTI directory layout. ``label_2``
    carries the weak 2D annotations (sentinel 3D columns); the full 3D
    ground truth goes to ``label_gt``."""
    split.make_dirs(with_gt=True)
    fid = scene.frame_id
    (split.velodyne_dir / f"{fid}.bin").write_bytes(write_point_cloud(scene.cloud))
    (split.calib_dir / f"{fid}.txt").write_text(write_calibration(scene.calib))
    (split.label_dir / f"{fid}.txt").write_text(write_label_file(scene.gt, mode="2d"))
    (split.gt_dir / f"{fid}.txt").write_text(write_label_file(scene.gt, mode="3d"))
    write_mask(split.mask_dir / f"{fid}.txt", merged_mask(scene))


def generate_split(root, split_name: str, n_frames: int, seed: int,
                   config: SceneConfig | None = None) -> list[str]:
    """Generate ``n_frames`` scenes (seeds seed..seed+n-1) into a split."""
    config = config or SceneConfig()
    split = KittiSplit(root, split_name)
    split.make_dirs(with_gt=True)
    frame_ids = []
    for k in range(n_frames):
        scene = generate_synthetic_scene(seed + k, config)
        write_scene(scene, split)
        frame_ids.append(scene.frame_id)
    split.write_meta({
        "extent": list(config.extent),
        "seed": seed,
        "n_frames": n_frames,
        "ground_y": config.ground_y,
    })
    return frame_ids
