"""
Rigid-body poses and the three-way motion decomposition.

A pose maps target-camera coordinates to source-camera coordinates,
P_s = R P_t + t. Every motion factors exactly as
T = T_rad * T_tan * T_rot: a pure rotation, then a translation
perpendicular to the optical axis, then a translation along it.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from ..utils.config import config
from ..utils.errors import InvalidAxisError, InvalidPoseError


def orthonormality_error(rotation: np.ndarray) -> float:
    """Frobenius norm of R^T R - I."""
    rotation = np.asarray(rotation, dtype=np.float64)
    return float(np.linalg.norm(rotation.T @ rotation - np.eye(3)))


def check_rotation(rotation: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """
    Validate a rotation matrix.

    Args:
        rotation: Candidate 3x3 matrix
        tol: Frobenius tolerance on R^T R - I (defaults to config)

    Returns:
        The matrix as a float64 array

    Raises:
        InvalidPoseError: Wrong shape, non-finite, not orthonormal or a reflection
    """
    tol = config.orthonormality_tol if tol is None else tol
    rotation = np.asarray(rotation, dtype=np.float64)

    if rotation.shape != (3, 3):
        raise InvalidPoseError(f"rotation must be 3x3, got shape {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise InvalidPoseError("rotation has non-finite entries")

    error = orthonormality_error(rotation)
    if error >= tol:
        raise InvalidPoseError(f"rotation is not orthonormal (deviation {error:.3e})")
    if np.linalg.det(rotation) <= 0:
        raise InvalidPoseError("rotation has negative determinant")
    return rotation


def orthonormalize_rotation(matrix: np.ndarray) -> np.ndarray:
    """
    Nearest rotation in the Frobenius sense (polar projection).

    Never applied implicitly; callers that repair a matrix do it on purpose.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    unitary, _ = polar(matrix)
    if np.linalg.det(unitary) <= 0:
        raise InvalidPoseError("matrix is closer to a reflection than to a rotation")
    return unitary


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """
    Rotation matrix for a rotation of `angle` radians about `axis`.

    Args:
        axis: Rotation axis; normalized before use
        angle: Angle in radians

    Raises:
        InvalidAxisError: Axis has zero norm
    """
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(axis)
    if not np.isfinite(norm) or norm == 0.0:
        raise InvalidAxisError("rotation axis must have nonzero norm")
    return Rotation.from_rotvec(axis / norm * float(angle)).as_matrix()


def rotation_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Exponential map from an axis-angle vector."""
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64).reshape(3)).as_matrix()


def rotation_to_rotvec(rotation: np.ndarray) -> np.ndarray:
    """Logarithm map to an axis-angle vector."""
    return Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()


def rotation_to_axis_angle(rotation: np.ndarray) -> Tuple[np.ndarray, float]:
    """Axis and angle of a rotation; the axis is +z for the identity."""
    rotvec = rotation_to_rotvec(rotation)
    angle = float(np.linalg.norm(rotvec))
    if angle == 0.0:
        return np.array([0.0, 0.0, 1.0]), 0.0
    return rotvec / angle, angle


def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]."""
    return float(Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).magnitude())


def relative_rotation_angle(rotation_a: np.ndarray, rotation_b: np.ndarray) -> float:
    """Angle in radians of R_a^T R_b."""
    return rotation_angle(np.asarray(rotation_a).T @ np.asarray(rotation_b))


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform with an orthonormal rotation; immutable."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = check_rotation(self.rotation)
        translation = np.asarray(self.translation, dtype=np.float64)
        if translation.size != 3 or not np.all(np.isfinite(translation)):
            raise InvalidPoseError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation.reshape(3)))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SE3Pose":
        """Build from a 4x4 homogeneous or 3x4 [R|t] matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((4, 4), (3, 4)):
            raise InvalidPoseError(f"expected a 4x4 or 3x4 matrix, got {matrix.shape}")
        if matrix.shape == (4, 4) and not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidPoseError("homogeneous matrix has an invalid last row")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, translation: np.ndarray) -> "SE3Pose":
        return cls(rotation_from_rotvec(rotvec), translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self * other: apply `other` first."""
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return self.compose(other)

    def inverse(self) -> "SE3Pose":
        rotation_t = self.rotation.T
        return SE3Pose(rotation_t, -rotation_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotvec(self) -> np.ndarray:
        return rotation_to_rotvec(self.rotation)

    def distance(self, other: "SE3Pose") -> float:
        """Frobenius norm of the difference of homogeneous matrices."""
        return float(np.linalg.norm(self.matrix() - other.matrix()))


@dataclass(frozen=True, eq=False)
class MotionComponents:
    """Pure rotation, tangential and radial factors of a motion."""
    rot: SE3Pose
    tan: SE3Pose
    rad: SE3Pose

    def __post_init__(self):
        if np.any(self.rot.translation != 0.0):
            raise InvalidPoseError("rotational factor must have zero translation")
        if not np.array_equal(self.tan.rotation, np.eye(3)) or self.tan.translation[2] != 0.0:
            raise InvalidPoseError("tangential factor must be a pure (t_x, t_y, 0) translation")
        if not np.array_equal(self.rad.rotation, np.eye(3)) or np.any(self.rad.translation[:2] != 0.0):
            raise InvalidPoseError("radial factor must be a pure (0, 0, t_z) translation")

    def recompose(self) -> SE3Pose:
        """T_rad * T_tan * T_rot."""
        return self.rad @ self.tan @ self.rot

    @property
    def rotation(self) -> np.ndarray:
        return self.rot.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.tan.translation + self.rad.translation

    def aligned_translation(self) -> np.ndarray:
        """Translation expressed in the rotation-aligned target frame, R^T t."""
        return self.rot.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class MotionDeviation:
    """Residual radial and tangential transforms left by an imperfect estimate."""
    delta_rad: SE3Pose
    delta_tan: SE3Pose


def decompose_motion(pose: SE3Pose) -> MotionComponents:
    """
    Split a pose into its rotational, tangential and radial factors.

    Args:
        pose: Motion to decompose

    Returns:
        Components recomposing as rad * tan * rot

    Raises:
        InvalidPoseError: Rotation is not orthonormal
    """
    rotation = check_rotation(pose.rotation)
    tx, ty, tz = pose.translation
    return MotionComponents(
        rot=SE3Pose(rotation, np.zeros(3)),
        tan=SE3Pose(np.eye(3), [tx, ty, 0.0]),
        rad=SE3Pose(np.eye(3), [0.0, 0.0, tz]),
    )


def deviation_transforms(true_pose: SE3Pose, est_components: MotionComponents) -> MotionDeviation:
    """
    Deviations of an estimated decomposition from the true motion.

    Evaluated from the definitions
    delta_rad = T_rad^-1 * T * Rot_est^-1 * Tan_est^-1 and
    delta_tan = T_tan^-1 * T * Rot_est^-1 * Rad_est^-1.
    """
    truth = decompose_motion(true_pose)
    undone_rot = true_pose @ est_components.rot.inverse()
    delta_rad = truth.rad.inverse() @ undone_rot @ est_components.tan.inverse()
    delta_tan = truth.tan.inverse() @ undone_rot @ est_components.rad.inverse()
    return MotionDeviation(delta_rad=delta_rad, delta_tan=delta_tan)


def deviation_closed_form(true_pose: SE3Pose, est_components: MotionComponents) -> MotionDeviation:
    """
    Same deviations expanded in the rotational error dR = R_est R^-1.

    delta_rad = [dR^-1, (I - dR^-1) t_tan - dR^-1 (t_tan_est - t_tan)], and
    delta_tan swaps the roles of the tangential and radial parts.
    """
    truth = decompose_motion(true_pose)
    delta_rotation_inv = true_pose.rotation @ est_components.rotation.T
    identity = np.eye(3)

    t_tan = truth.tan.translation
    t_rad = truth.rad.translation
    dt_tan = est_components.tan.translation - t_tan
    dt_rad = est_components.rad.translation - t_rad

    delta_rad = SE3Pose(
        delta_rotation_inv,
        (identity - delta_rotation_inv) @ t_tan - delta_rotation_inv @ dt_tan,
    )
    delta_tan = SE3Pose(
        delta_rotation_inv,
        (identity - delta_rotation_inv) @ t_rad - delta_rotation_inv @ dt_rad,
    )
    return MotionDeviation(delta_rad=delta_rad, delta_tan=delta_tan)
