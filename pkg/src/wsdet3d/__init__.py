"""Weak-supervision toolkit for 3D object detection.

Deterministic building blocks for learning 3D detectors from 2D boxes:
synthetic KITTI-style scenes, frustum-based initial 3D labels,
feature/output-level guidance losses, pseudo-label refinement rounds,
and an AP40 evaluator.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
