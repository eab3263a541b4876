"""
Trajectory container and pose-file interchange.

KITTI files hold one camera-to-world pose per line as the 12 entries of
[R|t] in row-major order. TUM files hold "timestamp tx ty tz qx qy qz qw".
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry.core import SE3Pose, orthonormality_error, orthonormalize_rotation
from ..utils.config import config
from ..utils.errors import InvalidPoseError, TrajectoryParseError
from ..utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Time-ordered camera-to-world poses.

    `repaired` lists the indices of poses whose rotation was
    re-orthonormalized while reading.
    """
    poses: Sequence[SE3Pose]
    timestamps: Optional[np.ndarray] = None
    repaired: Tuple[int, ...] = ()

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise InvalidPoseError("a trajectory needs at least one pose")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "repaired", tuple(int(index) for index in self.repaired))

        if self.timestamps is not None:
            timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
            if timestamps.size != len(poses):
                raise InvalidPoseError("timestamps and poses differ in count")
            if np.any(np.diff(timestamps) <= 0):
                raise InvalidPoseError("timestamps must be strictly increasing")
            object.__setattr__(self, "timestamps", timestamps)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Camera centers, shape (N, 3)."""
        return np.array([pose.translation for pose in self.poses])

    def path_lengths(self) -> np.ndarray:
        """Cumulative distance travelled up to each pose."""
        steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def _parse_rotation(matrix: np.ndarray, path: PathLike, line_number: int) -> Tuple[np.ndarray, bool]:
    error = orthonormality_error(matrix)
    if error > config.kitti_parse_orthonormality_tol:
        raise TrajectoryParseError(path, line_number, f"rotation is not orthonormal (deviation {error:.3e})")
    if np.linalg.det(matrix) <= 0:
        raise TrajectoryParseError(path, line_number, "rotation has negative determinant")
    if error >= config.orthonormality_tol:
        logger.warning("Re-orthonormalized pose rotation", path=str(path), line=line_number, deviation=error)
        return orthonormalize_rotation(matrix), True
    return matrix, False


def read_kitti_poses(path: PathLike) -> Trajectory:
    """
    Read a KITTI pose file; blank lines are ignored.

    Rotations within the parse tolerance but off by more than the
    orthonormality tolerance are projected onto SO(3); their indices are
    kept in `Trajectory.repaired`.

    Raises:
        TrajectoryParseError: Wrong token count, non-numeric or non-finite
            values, rotation off by more than the parse tolerance, or no poses
    """
    poses: List[SE3Pose] = []
    repaired: List[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise TrajectoryParseError(path, line_number, f"expected 12 values, found {len(tokens)}")
            try:
                values = np.array([float(token) for token in tokens])
            except ValueError:
                raise TrajectoryParseError(path, line_number, "values must be real numbers")
            if not np.all(np.isfinite(values)):
                raise TrajectoryParseError(path, line_number, "values must be finite")

            matrix = values.reshape(3, 4)
            rotation, fixed = _parse_rotation(matrix[:, :3], path, line_number)
            if fixed:
                repaired.append(len(poses))
            poses.append(SE3Pose(rotation, matrix[:, 3]))

    if not poses:
        raise TrajectoryParseError(path, 0, "file contains no poses")
    return Trajectory(poses, repaired=tuple(repaired))


def write_kitti_poses(trajectory: Trajectory, path: PathLike) -> None:
    """Write one pose per line with round-trip precision."""
    with open(path, "w", encoding="utf-8") as f:
        for pose in trajectory.poses:
            row = np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1)
            f.write(" ".join(f"{value:.17g}" for value in row) + "\n")


def read_tum_poses(path: PathLike) -> Trajectory:
    """
    Read a TUM trajectory; '#' comments and blank lines are ignored.

    Raises:
        TrajectoryParseError: Malformed line, zero quaternion, non-increasing
            timestamps or no poses
    """
    poses: List[SE3Pose] = []
    timestamps: List[float] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            content = line.split("#", 1)[0].replace(",", " ")
            tokens = content.split()
            if not tokens:
                continue
            if len(tokens) != 8:
                raise TrajectoryParseError(path, line_number, f"expected 8 values, found {len(tokens)}")
            try:
                values = np.array([float(token) for token in tokens])
            except ValueError:
                raise TrajectoryParseError(path, line_number, "values must be real numbers")
            if not np.all(np.isfinite(values)):
                raise TrajectoryParseError(path, line_number, "values must be finite")

            quaternion = values[4:8]
            if np.linalg.norm(quaternion) == 0:
                raise TrajectoryParseError(path, line_number, "quaternion has zero norm")
            if timestamps and values[0] <= timestamps[-1]:
                raise TrajectoryParseError(path, line_number, "timestamps must be strictly increasing")

            timestamps.append(float(values[0]))
            poses.append(SE3Pose(Rotation.from_quat(quaternion).as_matrix(), values[1:4]))

    if not poses:
        raise TrajectoryParseError(path, 0, "file contains no poses")
    return Trajectory(poses, np.array(timestamps))
