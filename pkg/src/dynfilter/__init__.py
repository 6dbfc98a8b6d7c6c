"""Dynamic-point filtering for visual SLAM front ends.

Semantic/geometric/temporal scoring of tracked keypoints, ground-plane
RANSAC, robust pose refinement, an adaptive frame pipeline, trajectory and
filter evaluation, and a synthetic-scene generator for end-to-end checks.
"""
from . import kernels
from .core import CameraIntrinsics, Plane, Pose

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "Plane", "Pose", "kernels", "__version__"]
