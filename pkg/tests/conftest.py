"""Shared fixtures: small cameras, seeded scenes and exact correspondence sets."""

import numpy as np
import pytest

from egoflow.geometry.core import SE3Pose, rotation_from_axis_angle
from egoflow.models import CameraIntrinsics, SceneKind, SceneSpec
from egoflow.simulation.scene import generate_pair, generate_scene


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 2.0) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(0.2, 1.0) * max_angle_deg)
    return rotation_from_axis_angle(rng.normal(size=3), angle)


def random_pose(rng: np.random.Generator, max_angle_deg: float = 2.0, scale: float = 0.5) -> SE3Pose:
    return SE3Pose(random_rotation(rng, max_angle_deg), rng.uniform(-scale, scale, size=3))


def mixed_motion(rotation_deg: float = 1.0, translation=(0.2, -0.1, 0.5)) -> SE3Pose:
    rotation = rotation_from_axis_angle(np.array([0.3, 1.0, 0.2]), np.deg2rad(rotation_deg))
    return SE3Pose(rotation, np.array(translation, dtype=np.float64))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics.kitti_like(160, 48)


@pytest.fixture
def scene_spec() -> SceneSpec:
    return SceneSpec(kind=SceneKind.SMOOTH_RANDOM, resolution=(160, 48), seed=7)


@pytest.fixture
def depth(scene_spec):
    return generate_scene(scene_spec)


@pytest.fixture
def motion() -> SE3Pose:
    return mixed_motion()


@pytest.fixture
def corr(depth, motion):
    return generate_pair(depth, motion)
