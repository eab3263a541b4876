"""
Dense flow synthesis from depth and motion.

Rigid flow for arbitrary motion, the homography flow of a pure rotation,
the tangential, radial and mixed translational flows, and the analytic
partial derivatives of the translational flow. Pixels are integer
(column, row) coordinates; pixels whose projective denominator falls
below the configured epsilon are masked rather than raising.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..models import CameraIntrinsics, FlowKind
from ..utils.config import config
from ..utils.errors import GridShapeError
from .core import SE3Pose, check_rotation


def _readonly(array: np.ndarray, dtype=np.float64) -> np.ndarray:
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth with an optional validity mask (invalid pixels hold 1.0)."""
    values: np.ndarray
    intrinsics: CameraIntrinsics
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.intrinsics.shape:
            raise GridShapeError(
                f"depth grid {values.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        if self.valid is None:
            valid = np.ones(values.shape, dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != values.shape:
                raise GridShapeError("depth mask shape does not match depth grid")

        valid_values = values[valid]
        if not np.all(np.isfinite(valid_values)) or np.any(valid_values <= 0):
            raise GridShapeError("depth must be positive and finite at valid pixels")

        object.__setattr__(self, "values", _readonly(np.where(valid, values, 1.0)))
        object.__setattr__(self, "valid", _readonly(valid, dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(self.values * factor, self.intrinsics, self.valid)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel 2D displacement; invalid pixels hold zero vectors."""
    vectors: np.ndarray
    kind: FlowKind
    valid: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise GridShapeError(f"flow must have shape (H, W, 2), got {vectors.shape}")
        if valid.shape != vectors.shape[:2]:
            raise GridShapeError("flow mask shape does not match flow grid")
        if not np.all(np.isfinite(vectors[valid])):
            raise GridShapeError("flow has non-finite vectors at valid pixels")

        vectors = np.where(valid[..., None], vectors, 0.0)
        object.__setattr__(self, "vectors", _readonly(vectors))
        object.__setattr__(self, "valid", _readonly(valid, dtype=bool))
        object.__setattr__(self, "kind", FlowKind(self.kind))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]


@dataclass(frozen=True, eq=False)
class FlowJacobian:
    """Partials of the translational flow w.r.t. depth and translation."""
    d_z: np.ndarray
    d_tx: np.ndarray
    d_ty: np.ndarray
    d_tz: np.ndarray
    valid: np.ndarray


def pixel_grid(intrinsics: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Column and row coordinates of every pixel, each of shape (H, W)."""
    u, v = np.meshgrid(
        np.arange(intrinsics.width, dtype=np.float64),
        np.arange(intrinsics.height, dtype=np.float64),
    )
    return u, v


def homogeneous_pixels(intrinsics: CameraIntrinsics) -> np.ndarray:
    """(u, v, 1) for every pixel, shape (H, W, 3)."""
    u, v = pixel_grid(intrinsics)
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def _check_depth_grid(depth: DepthMap) -> None:
    if depth.values.shape != depth.intrinsics.shape:
        raise GridShapeError("depth grid does not match its intrinsics")


def project(points: np.ndarray, intrinsics: CameraIntrinsics,
            valid: np.ndarray, epsilon: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Project camera-frame points of shape (H, W, 3) to pixel positions.

    Returns:
        Pixel positions (H, W, 2) and the mask of points with depth above epsilon
    """
    epsilon = config.denominator_epsilon if epsilon is None else epsilon
    z = points[..., 2]
    ok = valid & (z > epsilon)
    safe_z = np.where(ok, z, 1.0)
    positions = np.stack([
        intrinsics.fu * points[..., 0] / safe_z + intrinsics.u0,
        intrinsics.fv * points[..., 1] / safe_z + intrinsics.v0,
    ], axis=-1)
    return positions, ok


def rigid_flow(depth: DepthMap, pose: SE3Pose, epsilon: Optional[float] = None) -> FlowField:
    """
    Flow induced by a camera motion over a static scene.

    Args:
        depth: Target depth map
        pose: Target-to-source motion
        epsilon: Minimum transformed depth (defaults to config)

    Returns:
        Rigid flow; pixels whose source depth is not positive are invalid
    """
    _check_depth_grid(depth)
    intrinsics = depth.intrinsics
    rays = np.einsum("ij,hwj->hwi", intrinsics.K_inv, homogeneous_pixels(intrinsics))
    points_t = rays * depth.values[..., None]
    points_s = np.einsum("ij,hwj->hwi", pose.rotation, points_t) + pose.translation

    positions, ok = project(points_s, intrinsics, depth.valid, epsilon)
    u, v = pixel_grid(intrinsics)
    vectors = positions - np.stack([u, v], axis=-1)
    return FlowField(vectors, FlowKind.RIGID, ok)


def rotation_homography(rotation: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """H = K R K^-1."""
    rotation = check_rotation(rotation)
    return intrinsics.K @ rotation @ intrinsics.K_inv


def rotational_flow(rotation: np.ndarray, intrinsics: CameraIntrinsics,
                    epsilon: Optional[float] = None) -> FlowField:
    """
    Flow of a pure rotation; independent of scene depth.

    Each pixel moves to the dehomogenized h p~; pixels with h_3^T p~ below
    epsilon are invalid.
    """
    epsilon = config.denominator_epsilon if epsilon is None else epsilon
    homography = rotation_homography(rotation, intrinsics)
    pixels = homogeneous_pixels(intrinsics)
    mapped = np.einsum("ij,hwj->hwi", homography, pixels)

    denominator = mapped[..., 2]
    ok = denominator > epsilon
    safe = np.where(ok, denominator, 1.0)
    vectors = np.stack([
        mapped[..., 0] / safe - pixels[..., 0],
        mapped[..., 1] / safe - pixels[..., 1],
    ], axis=-1)
    return FlowField(vectors, FlowKind.ROTATIONAL, ok)


def tangential_flow(depth: DepthMap, t_xy: np.ndarray) -> FlowField:
    """(f_u t_x, f_v t_y) / z: parallel everywhere, inversely proportional to depth."""
    _check_depth_grid(depth)
    tx, ty = np.asarray(t_xy, dtype=np.float64).reshape(2)
    intrinsics = depth.intrinsics
    z = depth.values
    vectors = np.stack([intrinsics.fu * tx / z, intrinsics.fv * ty / z], axis=-1)
    return FlowField(vectors, FlowKind.TANGENTIAL, depth.valid)


def _offsets(intrinsics: CameraIntrinsics) -> np.ndarray:
    u, v = pixel_grid(intrinsics)
    return np.stack([u - intrinsics.u0, v - intrinsics.v0], axis=-1)


def _translation_denominator(depth: DepthMap, t_z: float,
                             epsilon: Optional[float]) -> Tuple[np.ndarray, np.ndarray]:
    epsilon = config.denominator_epsilon if epsilon is None else epsilon
    denominator = depth.values + t_z
    ok = depth.valid & (denominator > epsilon)
    return np.where(ok, denominator, 1.0), ok


def radial_flow(depth: DepthMap, t_z: float, epsilon: Optional[float] = None) -> FlowField:
    """-t_z / (z + t_z) * (p - p0): collinear with the direction to the principal point."""
    _check_depth_grid(depth)
    denominator, ok = _translation_denominator(depth, float(t_z), epsilon)
    vectors = (-float(t_z) / denominator)[..., None] * _offsets(depth.intrinsics)
    return FlowField(vectors, FlowKind.RADIAL, ok)


def _translational_numerator(depth: DepthMap, t: np.ndarray) -> np.ndarray:
    intrinsics = depth.intrinsics
    tx, ty, tz = t
    offsets = _offsets(intrinsics)
    return np.stack([
        intrinsics.fu * tx - offsets[..., 0] * tz,
        intrinsics.fv * ty - offsets[..., 1] * tz,
    ], axis=-1)


def translational_flow(depth: DepthMap, t: np.ndarray, epsilon: Optional[float] = None) -> FlowField:
    """Flow of a pure translation: (f_u t_x - (u - u0) t_z, f_v t_y - (v - v0) t_z) / (z + t_z)."""
    _check_depth_grid(depth)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    denominator, ok = _translation_denominator(depth, t[2], epsilon)
    vectors = _translational_numerator(depth, t) / denominator[..., None]
    return FlowField(vectors, FlowKind.TRANSLATIONAL, ok)


def flow_jacobian(depth: DepthMap, t: np.ndarray, epsilon: Optional[float] = None) -> FlowJacobian:
    """
    Analytic partials of translational_flow.

    Args:
        depth: Target depth map
        t: Translation (t_x, t_y, t_z)

    Returns:
        d/dz, d/dt_x, d/dt_y and d/dt_z, each of shape (H, W, 2)
    """
    _check_depth_grid(depth)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    intrinsics = depth.intrinsics
    denominator, ok = _translation_denominator(depth, t[2], epsilon)
    numerator = _translational_numerator(depth, t)
    offsets = _offsets(intrinsics)
    squared = (denominator ** 2)[..., None]
    zeros = np.zeros_like(denominator)

    d_z = -numerator / squared
    d_tx = np.stack([intrinsics.fu / denominator, zeros], axis=-1)
    d_ty = np.stack([zeros, intrinsics.fv / denominator], axis=-1)
    d_tz = -np.stack([
        offsets[..., 0] * depth.values + intrinsics.fu * t[0],
        offsets[..., 1] * depth.values + intrinsics.fv * t[1],
    ], axis=-1) / squared

    mask = ok[..., None]
    return FlowJacobian(
        d_z=np.where(mask, d_z, 0.0),
        d_tx=np.where(mask, d_tx, 0.0),
        d_ty=np.where(mask, d_ty, 0.0),
        d_tz=np.where(mask, d_tz, 0.0),
        valid=ok,
    )
