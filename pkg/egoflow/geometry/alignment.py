"""
Correspondence transformation: from matched pixels to aligned flows.

Source depth is warped onto the target grid, each match is backprojected
into the source camera, and the estimated rotation and one translation
component are undone. What remains is the coplanar flow (imaging planes
aligned, only the tangential translation left) and the coaxial flow
(optical axes aligned, only the radial translation left).
"""

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional, Tuple

import numpy as np

from ..models import CameraIntrinsics, FlowKind
from ..utils.config import config
from ..utils.errors import GridShapeError
from ..utils.logger import get_logger
from .core import MotionComponents, check_rotation
from .flow import DepthMap, FlowField, homogeneous_pixels, pixel_grid, project

logger = get_logger(__name__)

# Positions this close outside the image snap onto its border
BORDER_TOLERANCE = 1e-9


class SourcePoints(NamedTuple):
    """Source-camera coordinates of every match and where they are defined."""
    points: np.ndarray
    valid: np.ndarray


def bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    grid_valid: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample a (H, W) or (H, W, C) grid at fractional positions.

    A sample is valid when it lies inside [0, W-1] x [0, H-1] and every
    neighbour with nonzero weight is valid. Integer positions gather exactly.

    Returns:
        Sampled values (zero where invalid) and their validity mask
    """
    height, width = grid.shape[:2]
    inside = np.isfinite(xs) & np.isfinite(ys)
    inside &= (xs >= -BORDER_TOLERANCE) & (xs <= width - 1 + BORDER_TOLERANCE)
    inside &= (ys >= -BORDER_TOLERANCE) & (ys <= height - 1 + BORDER_TOLERANCE)

    x = np.clip(np.where(inside, xs, 0.0), 0, width - 1)
    y = np.clip(np.where(inside, ys, 0.0), 0, height - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = x - x0
    wy = y - y0

    weights = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]

    ok = inside.copy()
    if grid_valid is not None:
        for weight, (rows, cols) in zip(weights, corners):
            ok &= grid_valid[rows, cols] | (weight == 0)

    channel_axes = (1,) * (grid.ndim - 2)
    values = np.zeros(xs.shape + grid.shape[2:], dtype=np.float64)
    for weight, (rows, cols) in zip(weights, corners):
        values = values + weight.reshape(weight.shape + channel_axes) * grid[rows, cols]

    mask = ok.reshape(ok.shape + channel_axes)
    return np.where(mask, values, 0.0), ok


def _target_positions(flow: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    height, width = flow.shape
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return u + flow.u, v + flow.v


def warp_depth(depth_s: DepthMap, flow_ts: FlowField) -> DepthMap:
    """
    Pull source depth onto the target grid: D(p_t) = D_s(p_t + flow(p_t)).

    Out-of-bounds samples and samples touching invalid source depth are
    invalid in the result.
    """
    if depth_s.shape != flow_ts.shape:
        raise GridShapeError("source depth and flow grids differ in shape")
    xs, ys = _target_positions(flow_ts)
    values, ok = bilinear_sample(depth_s.values, xs, ys, depth_s.valid)
    ok &= flow_ts.valid & (values > 0)
    return DepthMap(np.where(ok, values, 1.0), depth_s.intrinsics, ok)


def inverse_warp(image: np.ndarray, flow_ts: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    """
    Synthesize the target view by sampling the source image at p_t + flow.

    Args:
        image: Source image, (H, W) or (H, W, C)
        flow_ts: Target-to-source flow

    Returns:
        Warped image and its validity mask
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != flow_ts.shape:
        raise GridShapeError("image and flow grids differ in shape")
    xs, ys = _target_positions(flow_ts)
    warped, ok = bilinear_sample(image, xs, ys)
    return warped, ok & flow_ts.valid


def flow_consistency_mask(flow_ts: FlowField, flow_st: FlowField,
                          threshold: Optional[float] = None) -> np.ndarray:
    """
    Forward-backward check: p_t + f_ts + f_st(p_t + f_ts) must return to p_t.

    Args:
        flow_ts: Target-to-source flow
        flow_st: Source-to-target flow on the source grid
        threshold: Round-trip tolerance in pixels (defaults to config)
    """
    threshold = config.fb_consistency_threshold if threshold is None else threshold
    if flow_ts.shape != flow_st.shape:
        raise GridShapeError("forward and backward flows differ in shape")
    xs, ys = _target_positions(flow_ts)
    backward, ok = bilinear_sample(flow_st.vectors, xs, ys, flow_st.valid)
    residual = np.linalg.norm(flow_ts.vectors + backward, axis=-1)
    return flow_ts.valid & ok & (residual < threshold)


def in_bounds_mask(flow_ts: FlowField) -> np.ndarray:
    """Matches that land inside the source image."""
    height, width = flow_ts.shape
    xs, ys = _target_positions(flow_ts)
    return (
        flow_ts.valid
        & (xs >= -BORDER_TOLERANCE) & (xs <= width - 1 + BORDER_TOLERANCE)
        & (ys >= -BORDER_TOLERANCE) & (ys <= height - 1 + BORDER_TOLERANCE)
    )


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """
    Target-to-source matches with both depth maps.

    `valid` is always a subset of the flow's own mask. When the exact
    source depth at each match is known (simulation) it is carried as
    `warped_depth_s`; otherwise it is obtained by warping `depth_s`.
    """
    flow_ts: FlowField
    depth_t: DepthMap
    depth_s: DepthMap
    valid: np.ndarray
    warped_depth_s: Optional[DepthMap] = None

    def __post_init__(self):
        shape = self.flow_ts.shape
        grids = [self.depth_t.shape, self.depth_s.shape]
        if self.warped_depth_s is not None:
            grids.append(self.warped_depth_s.shape)
        if any(grid != shape for grid in grids):
            raise GridShapeError("correspondence grids differ in shape")
        if self.depth_t.intrinsics != self.depth_s.intrinsics:
            raise GridShapeError("target and source depth use different intrinsics")

        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != shape:
            raise GridShapeError("correspondence mask shape does not match flow grid")
        valid = valid & self.flow_ts.valid
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_flows(
        cls,
        flow_ts: FlowField,
        depth_t: DepthMap,
        depth_s: DepthMap,
        user_mask: Optional[np.ndarray] = None,
        flow_st: Optional[FlowField] = None,
        fb_threshold: Optional[float] = None,
        warped_depth_s: Optional[DepthMap] = None,
    ) -> "CorrespondenceSet":
        """
        Build the geometric validity mask from its ingredients.

        Args:
            flow_ts: Target-to-source optical flow
            depth_t: Target depth
            depth_s: Source depth
            user_mask: Optional static-region mask (True = usable)
            flow_st: Optional backward flow enabling the consistency check
            fb_threshold: Consistency tolerance in pixels
            warped_depth_s: Exact source depth at each match, if known
        """
        valid = in_bounds_mask(flow_ts) & depth_t.valid
        if user_mask is not None:
            valid &= np.asarray(user_mask, dtype=bool)
        if flow_st is not None:
            valid &= flow_consistency_mask(flow_ts, flow_st, fb_threshold)

        logger.debug("Correspondences built", valid_pixels=int(valid.sum()), total_pixels=valid.size)
        return cls(flow_ts, depth_t, depth_s, valid, warped_depth_s)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.depth_t.intrinsics

    @property
    def shape(self) -> Tuple[int, int]:
        return self.flow_ts.shape

    @cached_property
    def source_depth(self) -> DepthMap:
        """Source depth sampled at each match."""
        if self.warped_depth_s is not None:
            return self.warped_depth_s
        return warp_depth(self.depth_s, self.flow_ts)

    @cached_property
    def source_points(self) -> SourcePoints:
        return backproject_source(self)


@dataclass(frozen=True, eq=False)
class AlignedFlows:
    """Flows left after imaging-plane and optical-axis alignment."""
    coplanar: FlowField
    coaxial: FlowField


def backproject_source(corr: CorrespondenceSet) -> SourcePoints:
    """
    Source-camera coordinates of each match: D(p_t) K^-1 (p_t + flow, 1).

    Pixels without valid warped depth are invalid.
    """
    depth = corr.source_depth
    intrinsics = corr.intrinsics
    pixels = homogeneous_pixels(intrinsics)
    pixels[..., :2] += corr.flow_ts.vectors
    rays = np.einsum("ij,hwj->hwi", intrinsics.K_inv, pixels)
    valid = corr.valid & depth.valid
    points = rays * depth.values[..., None]
    return SourcePoints(np.where(valid[..., None], points, 0.0), valid)


def derotate_points(source: SourcePoints, rotation: np.ndarray) -> np.ndarray:
    """R^-1 applied to every source point, shape (H, W, 3)."""
    rotation = check_rotation(rotation)
    return np.einsum("ji,hwj->hwi", rotation, source.points)


def flow_from_points(points: np.ndarray, valid: np.ndarray, intrinsics: CameraIntrinsics,
                     kind: FlowKind, epsilon: Optional[float] = None) -> FlowField:
    """Project points and subtract each pixel's own position."""
    positions, ok = project(points, intrinsics, valid, epsilon)
    u, v = pixel_grid(intrinsics)
    return FlowField(positions - np.stack([u, v], axis=-1), kind, ok)


def aligned_flows(corr: CorrespondenceSet, est: MotionComponents) -> AlignedFlows:
    """
    Coplanar and coaxial flows under an estimated motion.

    The source points are derotated by the estimated rotation; the
    estimated translation, expressed in that derotated frame, is then
    removed along the optical axis (coplanar flow) or across it
    (coaxial flow). With exact motion the coplanar flow is the tangential
    flow and the coaxial flow the radial flow of the true translation.
    """
    source = corr.source_points
    derotated = derotate_points(source, est.rotation)
    tx, ty, tz = est.aligned_translation()

    coplanar = flow_from_points(
        derotated - np.array([0.0, 0.0, tz]), source.valid, corr.intrinsics, FlowKind.COPLANAR
    )
    coaxial = flow_from_points(
        derotated - np.array([tx, ty, 0.0]), source.valid, corr.intrinsics, FlowKind.COAXIAL
    )
    return AlignedFlows(coplanar=coplanar, coaxial=coaxial)
