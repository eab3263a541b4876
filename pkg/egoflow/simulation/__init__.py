"""
Synthetic scenes, motions and trajectories with exact ground truth.
"""

from .scene import (
    SceneBundle,
    TrajectoryBundle,
    generate_pair,
    generate_scene,
    generate_trajectory,
    read_bundle,
    sample_motion,
    write_bundle,
)

__all__ = [
    "SceneBundle",
    "TrajectoryBundle",
    "generate_pair",
    "generate_scene",
    "generate_trajectory",
    "read_bundle",
    "sample_motion",
    "write_bundle",
]
