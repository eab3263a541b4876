"""
EgoFlow - ego-motion supervision from optical flow

Decomposes camera motion into rotation, tangential and radial translation,
turns matched pixels into coplanar and coaxial flows, and scores or refines
a pose estimate with the alignment and constraint-cycle losses. Ships a
synthetic scene generator for ground truth and trajectory metrics.
"""

__version__ = "0.1.0"
__author__ = "EgoFlow Team"
__description__ = "Geometric flow factorization for ego-motion estimation"

from .coordinator import Coordinator
from .geometry import (
    CorrespondenceSet,
    DepthMap,
    FlowField,
    MotionComponents,
    SE3Pose,
    aligned_flows,
    decompose_motion,
    rigid_flow,
)
from .supervision import evaluate_losses, recover_translation_closed_form, refine_pose
from .simulation import generate_pair, generate_scene, generate_trajectory
from .evaluation import Trajectory, ate, kitti_rel_errors, umeyama_align

__all__ = [
    "Coordinator",
    "CorrespondenceSet",
    "DepthMap",
    "FlowField",
    "MotionComponents",
    "SE3Pose",
    "aligned_flows",
    "decompose_motion",
    "rigid_flow",
    "evaluate_losses",
    "recover_translation_closed_form",
    "refine_pose",
    "generate_pair",
    "generate_scene",
    "generate_trajectory",
    "Trajectory",
    "ate",
    "kitti_rel_errors",
    "umeyama_align",
]
