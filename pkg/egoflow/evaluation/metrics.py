"""
Odometry metrics: 7-DoF alignment, ATE and KITTI relative errors.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..geometry.core import rotation_angle
from ..utils.config import config
from ..utils.errors import DegenerateAlignmentError, NoSegmentsError, TrajectoryMismatchError
from ..utils.logger import get_logger
from .trajectory_io import Trajectory

logger = get_logger(__name__)

RANK_TOLERANCE = 1e-10
SEGMENT_SLACK = 1e-9
SEGMENT_COLUMNS = ("first_frame", "last_frame", "length", "e_t", "e_r")


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R x + t."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "scale": float(self.scale),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


def _check_pairing(estimate: Trajectory, reference: Trajectory, minimum: int) -> None:
    if len(estimate) != len(reference):
        raise TrajectoryMismatchError(
            f"estimate has {len(estimate)} poses but reference has {len(reference)}"
        )
    if len(estimate) < minimum:
        raise DegenerateAlignmentError(f"need at least {minimum} poses, got {len(estimate)}")


def umeyama_align(estimate: Trajectory, reference: Trajectory, strict: bool = True) -> SimilarityTransform:
    """
    Least-squares similarity with reference ~ s R estimate + t.

    Args:
        estimate: Trajectory to align
        reference: Target positions
        strict: Reject collinear configurations, where the rotation about
            the common line is not unique

    Raises:
        TrajectoryMismatchError: Different pose counts
        DegenerateAlignmentError: Fewer than 3 poses, coincident positions,
            or collinear positions in strict mode
    """
    _check_pairing(estimate, reference, 3)
    source = estimate.positions()
    target = reference.positions()

    mean_source = source.mean(axis=0)
    mean_target = target.mean(axis=0)
    centered_source = source - mean_source
    centered_target = target - mean_target

    variance = float(np.mean(np.sum(centered_source ** 2, axis=1)))
    target_spread = float(np.mean(np.sum(centered_target ** 2, axis=1)))
    if variance <= 0 or target_spread <= 0:
        raise DegenerateAlignmentError("trajectory positions coincide")

    covariance = centered_target.T @ centered_source / source.shape[0]
    U, D, Vt = np.linalg.svd(covariance)
    if strict and D[1] <= RANK_TOLERANCE * D[0]:
        raise DegenerateAlignmentError("trajectory positions are collinear")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0

    rotation = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / variance)
    translation = mean_target - scale * rotation @ mean_source
    return SimilarityTransform(scale, rotation, translation)


def ate(estimate: Trajectory, reference: Trajectory) -> float:
    """
    RMSE of positions after 7-DoF alignment.

    Collinear trajectories are accepted: every optimal alignment leaves
    the same residual.
    """
    transform = umeyama_align(estimate, reference, strict=False)
    residual = transform.apply(estimate.positions()) - reference.positions()
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))


@dataclass(frozen=True)
class SegmentError:
    """Relative error of one (start frame, length) subsequence."""
    first_frame: int
    last_frame: int
    length: float
    translation_error: float
    rotation_error: float


@dataclass(frozen=True)
class RelativeErrors:
    """Mean translational error (%) and rotational error (deg / 100 m)."""
    e_t: float
    e_r: float
    segments: List[SegmentError]


def _last_frame(distances: np.ndarray, first: int, length: float) -> Optional[int]:
    reached = np.nonzero(distances[first:] >= distances[first] + length - SEGMENT_SLACK)[0]
    return first + int(reached[0]) if reached.size else None


def kitti_rel_errors(
    estimate: Trajectory,
    reference: Trajectory,
    segment_lengths: Optional[Sequence[float]] = None,
    step_size: Optional[int] = None,
) -> RelativeErrors:
    """
    KITTI odometry relative errors over fixed-length subsequences.

    For every start frame (every step_size frames) and length, the
    segment ends at the first frame whose reference path distance
    reaches the length. The error pose is inv(rel_est) * rel_ref.

    Raises:
        TrajectoryMismatchError: Different pose counts
        NoSegmentsError: Reference path shorter than every segment length
    """
    segment_lengths = list(config.kitti_segment_lengths if segment_lengths is None else segment_lengths)
    step_size = config.kitti_step_size if step_size is None else step_size
    _check_pairing(estimate, reference, 1)

    distances = reference.path_lengths()
    est_matrices = [pose.matrix() for pose in estimate.poses]
    ref_matrices = [pose.matrix() for pose in reference.poses]

    segments: List[SegmentError] = []
    for first in range(0, len(reference), step_size):
        for length in segment_lengths:
            last = _last_frame(distances, first, length)
            if last is None:
                continue
            rel_est = np.linalg.inv(est_matrices[first]) @ est_matrices[last]
            rel_ref = np.linalg.inv(ref_matrices[first]) @ ref_matrices[last]
            error = np.linalg.inv(rel_est) @ rel_ref
            segments.append(SegmentError(
                first_frame=first,
                last_frame=last,
                length=float(length),
                translation_error=float(np.linalg.norm(error[:3, 3]) / length * 100.0),
                rotation_error=float(np.degrees(rotation_angle(error[:3, :3])) / length * 100.0),
            ))

    if not segments:
        raise NoSegmentsError(
            f"reference path length {distances[-1]:.3f} is shorter than the "
            f"smallest segment ({min(segment_lengths):g})"
        )

    e_t = float(np.mean([segment.translation_error for segment in segments]))
    e_r = float(np.mean([segment.rotation_error for segment in segments]))
    logger.debug("Relative errors computed", segments=len(segments), e_t=e_t, e_r=e_r)
    return RelativeErrors(e_t=e_t, e_r=e_r, segments=segments)


def segment_rows(errors: RelativeErrors) -> np.ndarray:
    """Per-segment rows (first, last, length, e_t %, e_r deg/100m) for CSV export."""
    return np.array([
        [s.first_frame, s.last_frame, s.length, s.translation_error, s.rotation_error]
        for s in errors.segments
    ], dtype=np.float64).reshape(-1, len(SEGMENT_COLUMNS))


def translation_direction_error(estimate: np.ndarray, reference: np.ndarray) -> Optional[float]:
    """Angle in radians between two translations; None when either vanishes."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if np.linalg.norm(estimate) == 0 or np.linalg.norm(reference) == 0:
        return None
    return float(np.arctan2(np.linalg.norm(np.cross(estimate, reference)), estimate.dot(reference)))
