import numpy as np
import pytest
from scipy.optimize import least_squares

from egoflow.evaluation.metrics import (
    SEGMENT_COLUMNS,
    ate,
    kitti_rel_errors,
    segment_rows,
    translation_direction_error,
    umeyama_align,
)
from egoflow.evaluation.trajectory_io import Trajectory
from egoflow.geometry.core import SE3Pose, rotation_from_axis_angle, rotation_from_rotvec
from egoflow.utils.errors import (
    DegenerateAlignmentError,
    InvalidPoseError,
    NoSegmentsError,
    TrajectoryMismatchError,
)

from conftest import random_pose


def _trajectory(positions, rotations=None) -> Trajectory:
    positions = np.asarray(positions, dtype=np.float64)
    rotations = rotations if rotations is not None else [np.eye(3)] * len(positions)
    return Trajectory([SE3Pose(r, p) for r, p in zip(rotations, positions)])


def _straight(n: int, step: float = 1.0) -> Trajectory:
    return _trajectory(np.outer(np.arange(n) * step, [0.0, 0.0, 1.0]))


def _similarity(trajectory: Trajectory, scale: float, rotation: np.ndarray, offset: np.ndarray) -> Trajectory:
    positions = scale * trajectory.positions() @ rotation.T + offset
    return _trajectory(positions, [rotation @ pose.rotation for pose in trajectory.poses])


class TestTrajectory:
    def test_requires_poses(self):
        with pytest.raises(InvalidPoseError):
            Trajectory([])

    def test_timestamps_must_increase(self):
        with pytest.raises(InvalidPoseError):
            Trajectory([SE3Pose.identity()] * 2, timestamps=[1.0, 1.0])

    def test_path_lengths(self):
        trajectory = _trajectory([[0, 0, 0], [3, 4, 0], [3, 4, 1]])
        np.testing.assert_allclose(trajectory.path_lengths(), [0.0, 5.0, 6.0])


class TestUmeyama:
    def test_identity(self, rng):
        trajectory = Trajectory([random_pose(rng, scale=5.0) for _ in range(10)])
        transform = umeyama_align(trajectory, trajectory)
        assert transform.scale == pytest.approx(1.0)
        np.testing.assert_allclose(transform.rotation, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(transform.translation, 0.0, atol=1e-10)

    def test_recovers_a_known_similarity(self, rng):
        estimate = _trajectory(rng.normal(size=(20, 3)))
        rotation = rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi / 2)
        reference = _similarity(estimate, 2.0, rotation, np.array([1.0, -2.0, 3.0]))

        transform = umeyama_align(estimate, reference)
        assert transform.scale == pytest.approx(2.0)
        np.testing.assert_allclose(transform.rotation, rotation, atol=1e-10)
        np.testing.assert_allclose(transform.translation, [1.0, -2.0, 3.0], atol=1e-10)
        np.testing.assert_allclose(transform.apply(estimate.positions()), reference.positions(), atol=1e-10)

    def test_random_similarity(self, rng):
        estimate = _trajectory(rng.normal(size=(30, 3)) * 10)
        rotation = rotation_from_rotvec(rng.normal(size=3))
        reference = _similarity(estimate, 0.3, rotation, rng.normal(size=3))
        transform = umeyama_align(estimate, reference)
        assert transform.scale == pytest.approx(0.3)
        np.testing.assert_allclose(transform.rotation, rotation, atol=1e-9)

    def test_collinear_is_rejected_in_strict_mode(self):
        line = _straight(10)
        with pytest.raises(DegenerateAlignmentError):
            umeyama_align(line, line)
        assert umeyama_align(line, line, strict=False).scale == pytest.approx(1.0)

    def test_too_few_poses(self):
        with pytest.raises(DegenerateAlignmentError):
            umeyama_align(_straight(2), _straight(2))

    def test_count_mismatch(self):
        with pytest.raises(TrajectoryMismatchError):
            umeyama_align(_straight(5), _straight(6))


class TestAte:
    def test_similarity_is_absorbed(self, rng):
        estimate = _trajectory(rng.normal(size=(25, 3)))
        rotation = rotation_from_rotvec(rng.normal(size=3))
        reference = _similarity(estimate, 1.7, rotation, np.array([5.0, 0.0, -1.0]))
        assert ate(estimate, reference) < 1e-9

    def test_offset_is_absorbed(self, rng):
        reference = _trajectory(rng.normal(size=(25, 3)))
        estimate = _trajectory(reference.positions() + np.array([1.0, 2.0, 3.0]))
        assert ate(estimate, reference) < 1e-9

    def test_collinear_trajectories(self):
        assert ate(_straight(50, step=1.05), _straight(50)) < 1e-9

    def test_matches_brute_force_alignment(self, rng):
        reference = _trajectory(rng.normal(size=(40, 3)) * 3)
        estimate = _trajectory(reference.positions() * 0.9 + rng.normal(scale=0.1, size=(40, 3)))
        source, target = estimate.positions(), reference.positions()

        def residuals(params):
            scale = np.exp(params[0])
            rotation = rotation_from_rotvec(params[1:4])
            return (scale * source @ rotation.T + params[4:] - target).ravel()

        result = least_squares(residuals, np.zeros(7), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        brute = np.sqrt(np.mean(np.sum(result.fun.reshape(-1, 3) ** 2, axis=1)))
        assert ate(estimate, reference) == pytest.approx(brute, rel=1e-6)
        assert ate(estimate, reference) <= brute + 1e-12

    def test_alternating_noise_on_a_line(self):
        reference = _straight(8)
        noise = np.where(np.arange(8) % 2 == 0, 1.0, -1.0)
        estimate = _trajectory(reference.positions() + np.outer(noise, [0.0, 0.0, 1.0]))

        # collinear along z, so the optimal similarity is a 1D linear fit
        z_estimate, z_reference = estimate.positions()[:, 2], reference.positions()[:, 2]
        slope, intercept = np.polyfit(z_estimate, z_reference, 1)
        brute = np.sqrt(np.mean((slope * z_estimate + intercept - z_reference) ** 2))
        assert brute > 0.1
        assert ate(estimate, reference) == pytest.approx(brute, rel=1e-9)


class TestRelativeErrors:
    def test_scale_drift(self):
        reference = _straight(900)
        estimate = _straight(900, step=1.05)
        errors = kitti_rel_errors(estimate, reference)
        assert errors.e_t == pytest.approx(5.0, rel=1e-9)
        assert errors.e_r == pytest.approx(0.0, abs=1e-9)

    def test_yaw_bias(self):
        reference = _straight(900)
        rotations = [rotation_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.deg2rad(0.1 * k)) for k in range(900)]
        estimate = _trajectory(reference.positions(), rotations)
        errors = kitti_rel_errors(estimate, reference)
        assert errors.e_r == pytest.approx(10.0, rel=1e-9)

    def test_perfect_estimate(self, rng):
        reference = Trajectory([random_pose(rng, scale=2.0) for _ in range(120)])
        errors = kitti_rel_errors(reference, reference, segment_lengths=[10.0, 20.0])
        assert errors.e_t == pytest.approx(0.0, abs=1e-9)
        assert errors.e_r == pytest.approx(0.0, abs=1e-9)

    def test_rigid_placement_does_not_matter(self, rng):
        reference = _straight(300)
        estimate = _trajectory(
            reference.positions() + rng.normal(scale=0.2, size=(300, 3)),
            [rotation_from_rotvec(rng.normal(scale=0.01, size=3)) for _ in range(300)],
        )
        placement = random_pose(rng, max_angle_deg=30.0, scale=50.0)
        moved = Trajectory([placement @ pose for pose in estimate.poses])

        before = kitti_rel_errors(estimate, reference, segment_lengths=[50.0, 100.0])
        after = kitti_rel_errors(moved, reference, segment_lengths=[50.0, 100.0])
        assert after.e_t == pytest.approx(before.e_t, rel=1e-9)
        assert after.e_r == pytest.approx(before.e_r, rel=1e-9)

    def test_segments_and_step_size(self):
        errors = kitti_rel_errors(_straight(50), _straight(50), segment_lengths=[10.0, 20.0], step_size=5)
        assert len(errors.segments) == 14
        rows = segment_rows(errors)
        assert rows.shape == (14, len(SEGMENT_COLUMNS))
        first = errors.segments[0]
        assert (first.first_frame, first.last_frame, first.length) == (0, 10, 10.0)

    def test_short_path(self):
        with pytest.raises(NoSegmentsError):
            kitti_rel_errors(_straight(50), _straight(50))

    def test_count_mismatch(self):
        with pytest.raises(TrajectoryMismatchError):
            kitti_rel_errors(_straight(900), _straight(899))


class TestTranslationDirection:
    def test_angles(self):
        assert translation_direction_error([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]) == pytest.approx(np.pi / 2)
        assert translation_direction_error([1.0, 1.0, 0.0], [2.0, 2.0, 0.0]) == pytest.approx(0.0, abs=1e-12)

    def test_vanishing_translation(self):
        assert translation_direction_error([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) is None
