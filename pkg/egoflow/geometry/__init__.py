"""
Camera geometry: poses, motion decomposition, flow synthesis and
correspondence alignment.
"""

from .core import (
    MotionComponents,
    MotionDeviation,
    SE3Pose,
    decompose_motion,
    deviation_closed_form,
    deviation_transforms,
    rotation_from_axis_angle,
)
from .flow import (
    DepthMap,
    FlowField,
    FlowJacobian,
    flow_jacobian,
    radial_flow,
    rigid_flow,
    rotational_flow,
    tangential_flow,
    translational_flow,
)
from .alignment import AlignedFlows, CorrespondenceSet, aligned_flows, inverse_warp, warp_depth

__all__ = [
    "MotionComponents",
    "MotionDeviation",
    "SE3Pose",
    "decompose_motion",
    "deviation_closed_form",
    "deviation_transforms",
    "rotation_from_axis_angle",
    "DepthMap",
    "FlowField",
    "FlowJacobian",
    "flow_jacobian",
    "radial_flow",
    "rigid_flow",
    "rotational_flow",
    "tangential_flow",
    "translational_flow",
    "AlignedFlows",
    "CorrespondenceSet",
    "aligned_flows",
    "inverse_warp",
    "warp_depth",
]
