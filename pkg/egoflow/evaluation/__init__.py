"""
Trajectory metrics and pose-file interchange.
"""

from .trajectory_io import Trajectory, read_kitti_poses, read_tum_poses, write_kitti_poses
from .metrics import RelativeErrors, SimilarityTransform, ate, kitti_rel_errors, umeyama_align

__all__ = [
    "Trajectory",
    "read_kitti_poses",
    "read_tum_poses",
    "write_kitti_poses",
    "RelativeErrors",
    "SimilarityTransform",
    "ate",
    "kitti_rel_errors",
    "umeyama_align",
]
