import numpy as np
import pytest

from wsdet3d.types import Box2D, Box3D, Calibration


def make_calib(f=700.0, cx=621.0, cy=187.5):
    """KITTI-flavoured calibration: pinhole P, small rectification twist,
    LiDAR axes permuted into the camera frame."""
    p = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    th = np.deg2rad(0.5)
    r0 = np.array([
        [np.cos(th), -np.sin(th), 0.0],
        [np.sin(th), np.cos(th), 0.0],
        [0.0, 0.0, 1.0],
    ])
    tr = np.array([
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, -0.08],
        [1.0, 0.0, 0.0, -0.27],
    ])
    return Calibration(p, r0, tr)


def identity_calib():
    return Calibration(
        np.hstack([np.eye(3), np.zeros((3, 1))]),
        np.eye(3),
        np.hstack([np.eye(3), np.zeros((3, 1))]),
    )


def random_box3d(rng, score=None):
    return Box3D(
        location=(rng.uniform(-8, 8), rng.uniform(0.5, 2.5), rng.uniform(8, 40)),
        dims=(rng.uniform(1.2, 2.0), rng.uniform(1.4, 2.0), rng.uniform(3.0, 5.0)),
        yaw=rng.uniform(-np.pi, np.pi),
        score=score,
    )


def random_box2d(rng, extent=(375, 1242), score=None):
    h_img, w_img = extent
    x1 = rng.uniform(0, w_img - 40)
    y1 = rng.uniform(0, h_img - 30)
    return Box2D(x1, y1, x1 + rng.uniform(10, w_img - x1), y1 + rng.uniform(8, h_img - y1),
                 score=score)


@pytest.fixture
def calib():
    return make_calib()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
