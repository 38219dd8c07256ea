"""KITTI-format I/O: velodyne point clouds, calibration files, label
files, per-frame foreground-mask rasters, and the on-disk split layout
``{root}/{split}/{velodyne|calib|label_2|fg_mask|label_gt}/{frame}.*``.

Labels are written with KITTI's two-decimal fixed formatting, so
parse(write(x)) reproduces every float to within 5e-3.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import (
    Box2D,
    Box3D,
    Calibration,
    FrameLabelSet,
    LabeledObject,
    NonOrthonormalRotation,
    PointCloud,
    Provenance,
)

POINT_RECORD_BYTES = 16
_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}
_SENTINEL_LOC = -1000.0


class TruncatedRecord(ValueError):
    """Velodyne payload length is not a multiple of 16 bytes."""


class NonFiniteValue(ValueError):
    """A parsed value is NaN or infinite."""


class MissingKey(KeyError):
    """A required calibration key is absent."""


class BadMatrixShape(ValueError):
    """A calibration key carries the wrong number of values."""


class FieldCount(ValueError):
    """A label line has neither 15 nor 16 fields."""


class UnparsableNumber(ValueError):
    """A numeric label field failed to parse."""


class MissingBox3D(ValueError):
    """3D-mode label writing hit an object without a 3D box."""


# ------------------------------------------------------------ point clouds

def parse_point_cloud(data: bytes) -> PointCloud:
    """Decode little-endian float32 x,y,z,reflectance records."""
    if len(data) % POINT_RECORD_BYTES != 0:
        raise TruncatedRecord(
            f"{len(data)} bytes is not a multiple of {POINT_RECORD_BYTES}")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if pts.size and not np.isfinite(pts).all():
        raise NonFiniteValue("point cloud contains NaN/Inf")
    return PointCloud(pts.copy())


def write_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.data, dtype="<f4").tobytes()


# ------------------------------------------------------------- calibration

def parse_calibration(text: str, strict: bool = False) -> Calibration:
    """Parse ``KEY: v1 v2 ...`` lines; requires P2, R0_rect,
    Tr_velo_to_cam. Orthonormality deviations warn unless ``strict``."""
    values: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, payload = line.split(":", 1)
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        try:
            nums = np.array([float(t) for t in payload.split()], dtype=np.float64)
        except ValueError as exc:
            raise UnparsableNumber(f"calibration key {key}: {exc}") from None
        rows, cols = _CALIB_KEYS[key]
        if nums.size != rows * cols:
            raise BadMatrixShape(
                f"{key} expects {rows * cols} values, got {nums.size}")
        values[key] = nums.reshape(rows, cols)
    for key in _CALIB_KEYS:
        if key not in values:
            raise MissingKey(key)
    calib = Calibration(values["P2"], values["R0_rect"], values["Tr_velo_to_cam"])
    calib.check(strict=strict)
    return calib


def write_calibration(calib: Calibration) -> str:
    def row(key, mat):
        return key + ": " + " ".join(f"{v:.17g}" for v in np.asarray(mat).ravel())

    return "\n".join([
        row("P2", calib.cam_projection),
        row("R0_rect", calib.rectification),
        row("Tr_velo_to_cam", calib.lidar_to_cam),
    ]) + "\n"


# ------------------------------------------------------------------ labels

def _parse_float(token: str, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise UnparsableNumber(f"cannot parse {what} from {token!r}") from None


def parse_label_file(text: str, expects_3d: bool = True, frame_id: str = "unknown",
                     provenance: Provenance | None = None) -> FrameLabelSet:
    """Parse KITTI label lines. Sentinel 3D columns (h <= 0 or the
    -1000 location) yield 2D-only objects; ``expects_3d=False`` ignores
    the 3D columns entirely. DontCare lines are retained with a flag."""
    objects = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (15, 16):
            raise FieldCount(f"line {lineno}: {len(fields)} fields")
        cls = fields[0]
        nums = [_parse_float(t, f"line {lineno} field {i + 1}")
                for i, t in enumerate(fields[1:])]
        truncation, occlusion, alpha = nums[0], int(nums[1]), nums[2]
        box2d = Box2D(*nums[3:7])
        score = nums[14] if len(fields) == 16 else None
        dontcare = cls == "DontCare"
        box3d = None
        if expects_3d and not dontcare:
            h, w, l = nums[7:10]
            x, y, z = nums[10:13]
            ry = nums[13]
            if h > 0 and w > 0 and l > 0 and x > _SENTINEL_LOC:
                box3d = Box3D(location=(x, y, z), dims=(h, w, l), yaw=ry, score=score)
        if score is not None:
            box2d = box2d.with_score(score)
        objects.append(LabeledObject(
            cls=cls, box2d=box2d, box3d=box3d, truncation=truncation,
            occlusion=occlusion, alpha=alpha, dontcare=dontcare))
    return FrameLabelSet(frame_id=frame_id, objects=objects,
                         provenance=provenance or Provenance.ground_truth())


def _object_alpha(obj: LabeledObject) -> float:
    if obj.alpha is not None:
        return obj.alpha
    if obj.box3d is not None:
        x, _, z = obj.box3d.location
        return obj.box3d.yaw - math.atan2(x, z)
    return -10.0


def format_label_line(obj: LabeledObject, mode: str = "3d") -> str:
    """One KITTI label line with two-decimal fixed floats."""
    if mode not in ("3d", "2d"):
        raise ValueError(f"unknown label mode {mode!r}")
    box3d = obj.box3d
    if mode == "3d" and box3d is None and not obj.dontcare:
        raise MissingBox3D(f"object {obj.cls} lacks a 3D box")
    if mode == "2d" or box3d is None:
        dims = (-1.0, -1.0, -1.0)
        loc = (_SENTINEL_LOC, _SENTINEL_LOC, _SENTINEL_LOC)
        ry = -10.0
    else:
        dims = box3d.dims
        loc = box3d.location
        ry = box3d.yaw
    score = None
    if box3d is not None and box3d.score is not None:
        score = box3d.score
    elif obj.box2d.score is not None:
        score = obj.box2d.score
    b = obj.box2d
    parts = [
        obj.cls,
        f"{obj.truncation:.2f}",
        f"{obj.occlusion:d}",
        f"{_object_alpha(obj):.2f}",
        f"{b.x1:.2f}", f"{b.y1:.2f}", f"{b.x2:.2f}", f"{b.y2:.2f}",
        f"{dims[0]:.2f}", f"{dims[1]:.2f}", f"{dims[2]:.2f}",
        f"{loc[0]:.2f}", f"{loc[1]:.2f}", f"{loc[2]:.2f}",
        f"{ry:.2f}",
    ]
    if score is not None:
        parts.append(f"{score:.2f}")
    return " ".join(parts)


def write_label_file(labels: FrameLabelSet, mode: str = "3d") -> str:
    lines = [format_label_line(obj, mode) for obj in labels.objects]
    return "".join(line + "\n" for line in lines)


# ------------------------------------------------------------------- masks

def read_mask(path: Path) -> np.ndarray:
    """Read a 0/1 raster: rows of 0/1 characters, or a PNG."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)
    rows = [r for r in path.read_text().splitlines() if r]
    return np.array([[1 if ch == "1" else 0 for ch in row] for row in rows],
                    dtype=np.uint8)


def write_mask(path: Path, mask: np.ndarray) -> None:
    path = Path(path)
    mask = np.asarray(mask)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path)
        return
    body = "\n".join("".join("1" if v else "0" for v in row) for row in mask)
    path.write_text(body + ("\n" if mask.size else ""))


# ---------------------------------------------------------------- datasets

@dataclass
class KittiSplit:
    """Path helper for one split of a KITTI-layout dataset."""

    root: Path
    split: str

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def base(self) -> Path:
        return self.root / self.split

    @property
    def velodyne_dir(self) -> Path:
        return self.base / "velodyne"

    @property
    def calib_dir(self) -> Path:
        return self.base / "calib"

    @property
    def label_dir(self) -> Path:
        return self.base / "label_2"

    @property
    def mask_dir(self) -> Path:
        return self.base / "fg_mask"

    @property
    def gt_dir(self) -> Path:
        return self.base / "label_gt"

    @property
    def meta_path(self) -> Path:
        return self.base / "meta.json"

    def make_dirs(self, with_gt: bool = True) -> None:
        for d in (self.velodyne_dir, self.calib_dir, self.label_dir, self.mask_dir):
            d.mkdir(parents=True, exist_ok=True)
        if with_gt:
            self.gt_dir.mkdir(parents=True, exist_ok=True)

    def frame_ids(self) -> list[str]:
        if not self.label_dir.is_dir():
            return []
        return sorted(p.stem for p in self.label_dir.glob("*.txt"))

    def read_cloud(self, frame_id: str) -> PointCloud:
        return parse_point_cloud((self.velodyne_dir / f"{frame_id}.bin").read_bytes())

    def read_calib(self, frame_id: str, strict: bool = False) -> Calibration:
        return parse_calibration(
            (self.calib_dir / f"{frame_id}.txt").read_text(), strict=strict)

    def read_labels(self, frame_id: str, expects_3d: bool = False) -> FrameLabelSet:
        return parse_label_file(
            (self.label_dir / f"{frame_id}.txt").read_text(),
            expects_3d=expects_3d, frame_id=frame_id)

    def read_gt(self, frame_id: str) -> FrameLabelSet:
        return parse_label_file(
            (self.gt_dir / f"{frame_id}.txt").read_text(),
            expects_3d=True, frame_id=frame_id)

    def has_gt(self) -> bool:
        return self.gt_dir.is_dir()

    def read_frame_mask(self, frame_id: str) -> np.ndarray | None:
        for suffix in (".txt", ".png"):
            p = self.mask_dir / f"{frame_id}{suffix}"
            if p.exists():
                return read_mask(p)
        return None

    def read_meta(self) -> dict:
        if self.meta_path.exists():
            return json.loads(self.meta_path.read_text())
        return {}

    def write_meta(self, meta: dict) -> None:
        self.meta_path.parent.mkdir(parents=True, exist_ok=True)
        self.meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_label_dir(labels_by_frame: dict[str, FrameLabelSet], out_dir: Path,
                    mode: str = "3d") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame_id in sorted(labels_by_frame):
        (out_dir / f"{frame_id}.txt").write_text(
            write_label_file(labels_by_frame[frame_id], mode=mode))


def read_label_dir(label_dir: Path, expects_3d: bool = True,
                   provenance: Provenance | None = None) -> dict[str, FrameLabelSet]:
    label_dir = Path(label_dir)
    out = {}
    for p in sorted(label_dir.glob("*.txt")):
        out[p.stem] = parse_label_file(p.read_text(), expects_3d=expects_3d,
                                       frame_id=p.stem, provenance=provenance)
    return out
