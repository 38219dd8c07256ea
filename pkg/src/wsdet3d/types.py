"""Core domain types shared across the toolkit.

Conventions (fixed across every module):

* Point clouds are stored in the LiDAR frame (x forward, y left, z up).
* All box geometry lives in the rectified camera frame (x right, y down,
  z forward). ``Box3D.location`` is the bottom-face centre; ``yaw``
  rotates about the camera's vertical (y) axis.
* 2D boxes are axis-aligned pixel rectangles with x1 <= x2, y1 <= y2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidBox(ValueError):
    """A box violates its geometric invariants."""


class NonOrthonormalRotation(ValueError):
    """A rotation block deviates from orthonormality beyond tolerance."""


class NonOrthonormalRotationWarning(UserWarning):
    """Lenient-mode counterpart of :class:`NonOrthonormalRotation`."""


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(yaw, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image-plane box in pixels, optional confidence."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise InvalidBox(f"empty extent: ({self.x1},{self.y1})-({self.x2},{self.y2})")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise InvalidBox(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def with_score(self, score: float | None) -> "Box2D":
        return replace(self, score=score)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the rectified camera frame.

    ``location`` is the bottom-face centre (x, y, z) in meters, ``dims``
    is (h, w, l), ``yaw`` the rotation about the vertical axis in
    radians, normalised to (-pi, pi] on construction.
    """

    location: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    score: float | None = None

    def __post_init__(self):
        h, w, l = self.dims
        if not (h > 0 and w > 0 and l > 0):
            raise InvalidBox(f"non-positive dims {self.dims}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise InvalidBox(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def h(self) -> float:
        return self.dims[0]

    @property
    def w(self) -> float:
        return self.dims[1]

    @property
    def l(self) -> float:
        return self.dims[2]

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    @property
    def y_bottom(self) -> float:
        return self.location[1]

    @property
    def y_top(self) -> float:
        return self.location[1] - self.h

    def with_score(self, score: float | None) -> "Box3D":
        return replace(self, score=score)


@dataclass
class Calibration:
    """Camera projection, rectification, and LiDAR-to-camera transform.

    ``cam_projection`` (3x4, pixels) projects rectified-camera-frame
    points; ``rectification`` (3x3) maps the camera reference frame to
    the rectified frame; ``lidar_to_cam`` (3x4) maps LiDAR points to the
    camera reference frame.
    """

    cam_projection: np.ndarray
    rectification: np.ndarray
    lidar_to_cam: np.ndarray

    def __post_init__(self):
        self.cam_projection = np.asarray(self.cam_projection, dtype=np.float64).reshape(3, 4)
        self.rectification = np.asarray(self.rectification, dtype=np.float64).reshape(3, 3)
        self.lidar_to_cam = np.asarray(self.lidar_to_cam, dtype=np.float64).reshape(3, 4)

    def check(self, strict: bool = True, tol: float = 1e-6) -> bool:
        """Validate invariants. Non-orthonormal rotations raise when
        ``strict`` and warn otherwise; returns True when fully valid."""
        ok = True
        for name, r in (("rectification", self.rectification),
                        ("lidar_to_cam rotation", self.lidar_to_cam[:, :3])):
            err = np.abs(r @ r.T - np.eye(3)).max()
            if err > tol:
                ok = False
                msg = f"{name} deviates from orthonormal by {err:.3g}"
                if strict:
                    raise NonOrthonormalRotation(msg)
                warnings.warn(msg, NonOrthonormalRotationWarning)
        if self.cam_projection[0, 0] == 0.0 or self.cam_projection[1, 1] == 0.0:
            raise InvalidBox("cam_projection has a zero focal entry")
        return ok

    def lidar_to_rect(self, points: np.ndarray) -> np.ndarray:
        """LiDAR-frame (N, 3) points -> rectified camera frame (N, 3)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.lidar_to_cam[:, :3].T + self.lidar_to_cam[:, 3]
        return cam @ self.rectification.T

    def rect_to_lidar(self, points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`lidar_to_rect`."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.rectification  # R^-1 == R^T for orthonormal R
        return (cam - self.lidar_to_cam[:, 3]) @ self.lidar_to_cam[:, :3]


@dataclass
class PointCloud:
    """LiDAR returns: (N, 4) float32 of x, y, z, reflectance."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32).reshape(-1, 4)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.data[:, 3]


_PROVENANCE_KINDS = ("ground_truth", "initial", "pseudo", "prediction")


@dataclass(frozen=True)
class Provenance:
    """Where a label set came from; pseudo labels carry their round."""

    kind: str
    round: int | None = None

    def __post_init__(self):
        if self.kind not in _PROVENANCE_KINDS:
            raise ValueError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "pseudo":
            if self.round is None or self.round < 0:
                raise ValueError("pseudo provenance needs round >= 0")
        elif self.round is not None:
            raise ValueError(f"{self.kind} provenance takes no round")

    @classmethod
    def ground_truth(cls) -> "Provenance":
        return cls("ground_truth")

    @classmethod
    def initial(cls) -> "Provenance":
        return cls("initial")

    @classmethod
    def pseudo(cls, round: int) -> "Provenance":
        return cls("pseudo", round)

    @classmethod
    def prediction(cls) -> "Provenance":
        return cls("prediction")


@dataclass
class LabeledObject:
    """One annotated object: class, 2D box, optional 3D box, metadata."""

    cls: str
    box2d: Box2D
    box3d: Box3D | None = None
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float | None = None
    dontcare: bool = False


@dataclass
class FrameLabelSet:
    """Per-frame collection of labeled objects with provenance."""

    frame_id: str
    objects: list[LabeledObject] = field(default_factory=list)
    provenance: Provenance = field(default_factory=Provenance.ground_truth)

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be nonempty")

    def __len__(self) -> int:
        return len(self.objects)

    def real_objects(self) -> list[LabeledObject]:
        """Objects excluding DontCare entries."""
        return [o for o in self.objects if not o.dontcare]


@dataclass
class SyntheticScene:
    """A generated frame: GT labels, cloud, calibration, masks.

    ``point_sources`` records where each point came from (-1 ground,
    -2 clutter, else index into ``gt.objects``); ``masks`` holds one
    0/1 array per GT object, shaped to its 2D box footprint.
    """

    frame_id: str
    gt: FrameLabelSet
    cloud: PointCloud
    calib: Calibration
    extent: tuple[int, int]  # (H, W)
    masks: list[np.ndarray]
    point_sources: np.ndarray
    ground_y: float
