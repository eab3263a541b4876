"""
Deterministic synthetic scenes with exact ground truth.

Generates depth maps, ego-motions, correspondence sets and multi-frame
trajectories. Pair generation projects every pixel as an independent
3D point (no shared code with the grid-based flow synthesis) and
resolves fold-overs with a z-buffer on the source image.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import distance_transform_edt, zoom

from ..evaluation.trajectory_io import Trajectory, read_kitti_poses, write_kitti_poses
from ..geometry.alignment import BORDER_TOLERANCE, CorrespondenceSet
from ..geometry.core import SE3Pose, rotation_from_axis_angle
from ..geometry.flow import DepthMap, FlowField
from ..models import CameraIntrinsics, FlowKind, MotionKind, MotionSpec, SceneKind, SceneSpec
from ..utils.config import config
from ..utils.errors import BundleError, DegenerateMotionError, FileFormatError, SpecError
from ..utils.formats import read_flo, read_mask, read_pfm, write_flo, write_mask, write_pfm
from ..utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

# Farthest a sample can sit from another in its z-buffer cell, in slope units
CELL_REACH = 2.0

BUNDLE_MEMBERS = {
    "depth_t": "depth_t.pfm",
    "depth_s": "depth_s.pfm",
    "depth_warped": "depth_warped.pfm",
    "flow": "flow.flo",
    "mask": "mask.pgm",
    "motion": "motion.txt",
    "scene": "scene.json",
}


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def generate_scene(spec: SceneSpec) -> DepthMap:
    """
    Render a depth map for the requested layout.

    constant-plane uses plane_depth (default: middle of the range);
    sloped-plane tilts a plane whose inverse depth spans the range along a
    seeded direction; smooth-random upsamples coarse value noise bicubically
    and rescales it into the range.
    """
    intrinsics = spec.camera()
    height, width = intrinsics.shape
    low, high = spec.depth_range
    rng = _rng(spec.seed)

    if spec.kind == SceneKind.CONSTANT_PLANE:
        plane = spec.plane_depth if spec.plane_depth is not None else 0.5 * (low + high)
        values = np.full((height, width), float(plane))

    elif spec.kind == SceneKind.SLOPED_PLANE:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        u, v = np.meshgrid(np.arange(width) / max(width - 1, 1), np.arange(height) / max(height - 1, 1))
        ramp = np.cos(angle) * u + np.sin(angle) * v
        span = ramp.max() - ramp.min()
        ramp = (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)
        inverse = 1.0 / high + ramp * (1.0 / low - 1.0 / high)
        values = np.clip(1.0 / inverse, low, high)

    else:
        coarse_shape = (max(4, height // 16), max(4, width // 16))
        noise = rng.uniform(0.0, 1.0, coarse_shape)
        smooth = zoom(noise, (height / coarse_shape[0], width / coarse_shape[1]), order=3)[:height, :width]
        span = smooth.max() - smooth.min()
        if span > 0:
            values = low + (smooth - smooth.min()) / span * (high - low)
        else:
            values = np.full((height, width), 0.5 * (low + high))
        values = np.clip(values, low, high)

    logger.info("Scene generated", kind=spec.kind.value, seed=spec.seed,
                depth_min=float(values.min()), depth_max=float(values.max()))
    return DepthMap(values, intrinsics)


def sample_motion(spec: MotionSpec, seed: Optional[int] = None) -> SE3Pose:
    """
    Draw a motion with the kind's zero pattern.

    Each free component has magnitude uniform in [0.5, 1] times its bound
    and a random sign; fixed components replace sampled ones.
    """
    rng = _rng(spec.seed if seed is None else seed)
    kind = spec.kind

    axis = rng.normal(size=3)
    angle = np.deg2rad(spec.max_rotation_deg) * rng.uniform(0.5, 1.0)
    signs = rng.choice([-1.0, 1.0], size=3)
    scales = rng.uniform(0.5, 1.0, size=3)

    rotation = np.eye(3)
    if kind in (MotionKind.PURE_ROTATION, MotionKind.MIXED) and angle > 0:
        rotation = rotation_from_axis_angle(axis, angle)
    translation = np.zeros(3)
    if kind in (MotionKind.PURE_TANGENTIAL, MotionKind.MIXED):
        translation[:2] = signs[:2] * scales[:2] * spec.max_tangential
    if kind in (MotionKind.PURE_RADIAL, MotionKind.MIXED):
        translation[2] = signs[2] * scales[2] * spec.max_radial

    if spec.fixed_rotvec is not None:
        rotvec = np.asarray(spec.fixed_rotvec, dtype=np.float64)
        norm = np.linalg.norm(rotvec)
        rotation = rotation_from_axis_angle(rotvec, norm) if norm > 0 else np.eye(3)
    if spec.fixed_translation is not None:
        translation = np.asarray(spec.fixed_translation, dtype=np.float64)

    return SE3Pose(rotation, translation)


def perturb_pose(pose: SE3Pose, rotation_deg: float = 0.0, translation_fraction: float = 0.0,
                 seed: int = 0) -> SE3Pose:
    """
    Pose with a rotation error of exactly `rotation_deg` about a random axis
    (composed on the left) and a translation offset of
    `translation_fraction * |t|` perpendicular to t.
    """
    rng = _rng(seed)
    rotation = pose.rotation
    if rotation_deg:
        rotation = rotation_from_axis_angle(rng.normal(size=3), np.deg2rad(rotation_deg)) @ rotation

    translation = pose.translation.copy()
    norm = np.linalg.norm(translation)
    if translation_fraction and norm > 0:
        direction = translation / norm
        offset = rng.normal(size=3)
        offset -= offset.dot(direction) * direction
        offset /= np.linalg.norm(offset)
        translation = translation + translation_fraction * norm * offset

    return SE3Pose(rotation, translation)


def _surface_slope(z_s: np.ndarray, us: np.ndarray, vs: np.ndarray, valid: np.ndarray,
                   shape: Tuple[int, int]) -> np.ndarray:
    """
    Depth change per source pixel of the surface through each sample.

    Along each grid axis the smaller of the forward and backward one-sided
    slopes is used, so a depth discontinuity on one side does not count.
    The larger of the two axes is returned, flattened.
    """
    z = z_s.reshape(shape)
    positions = np.stack([us, vs], axis=-1).reshape(*shape, 2)
    ok = valid.reshape(shape)
    slope = np.zeros(shape)
    for axis in (0, 1):
        head = tuple(slice(None, -1) if a == axis else slice(None) for a in (0, 1))
        tail = tuple(slice(1, None) if a == axis else slice(None) for a in (0, 1))

        rise = np.abs(z[tail] - z[head])
        run = np.maximum(np.linalg.norm(positions[tail] - positions[head], axis=-1), 1e-6)
        pair = np.where(ok[tail] & ok[head], rise / run, np.inf)

        forward = np.full(shape, np.inf)
        backward = np.full(shape, np.inf)
        forward[head] = pair
        backward[tail] = pair
        one_sided = np.minimum(forward, backward)
        slope = np.maximum(slope, np.where(np.isfinite(one_sided), one_sided, 0.0))
    return slope.ravel()


def generate_pair(
    scene: DepthMap,
    motion: SE3Pose,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
    min_visible_fraction: Optional[float] = None,
) -> CorrespondenceSet:
    """
    Ground-truth correspondences for a static scene seen from two poses.

    Args:
        scene: Target depth map
        motion: Target-to-source motion
        noise_sigma: Standard deviation of isotropic Gaussian flow noise (pixels),
            added after the masks are computed
        noise_seed: Seed of the noise
        min_visible_fraction: Required share of mutually visible pixels

    Returns:
        Correspondences with the exact source depth at each match

    Raises:
        DegenerateMotionError: Too few pixels visible in both views
    """
    min_visible_fraction = (config.min_visible_fraction
                            if min_visible_fraction is None else min_visible_fraction)
    intrinsics = scene.intrinsics
    height, width = intrinsics.shape
    K = intrinsics.K

    rows, cols = np.indices((height, width))
    pixels = np.stack([cols.ravel(), rows.ravel(), np.ones(height * width)], axis=1).astype(np.float64)
    depth = scene.values.ravel()

    points_t = np.einsum("ij,nj->ni", intrinsics.K_inv, pixels) * depth[:, None]
    points_s = np.einsum("ij,nj->ni", motion.rotation, points_t) + motion.translation
    z_s = points_s[:, 2]

    in_front = scene.valid.ravel() & (z_s > config.denominator_epsilon)
    safe_z = np.where(in_front, z_s, 1.0)
    projected = np.einsum("ij,nj->ni", K, points_s) / safe_z[:, None]
    us, vs = projected[:, 0], projected[:, 1]

    inside = in_front & (us >= -BORDER_TOLERANCE) & (us <= width - 1 + BORDER_TOLERANCE)
    inside &= (vs >= -BORDER_TOLERANCE) & (vs <= height - 1 + BORDER_TOLERANCE)

    cell_rows = np.clip(np.rint(vs), 0, height - 1).astype(np.int64)
    cell_cols = np.clip(np.rint(us), 0, width - 1).astype(np.int64)
    zbuffer = np.full((height, width), np.inf)
    np.minimum.at(zbuffer, (cell_rows[inside], cell_cols[inside]), z_s[inside])

    # Samples of one surface share a cell at depths that differ by its slope
    nearest = zbuffer[cell_rows, cell_cols]
    slope = _surface_slope(z_s, us, vs, inside, (height, width))
    tolerance = CELL_REACH * slope + config.occlusion_tie_tolerance
    visible = inside & (z_s <= nearest + tolerance)

    fraction = float(visible.mean())
    if fraction < min_visible_fraction:
        raise DegenerateMotionError(
            f"only {fraction:.1%} of pixels are visible in both views "
            f"(need {min_visible_fraction:.0%})"
        )

    covered = np.isfinite(zbuffer)
    if covered.any():
        _, (fill_rows, fill_cols) = distance_transform_edt(~covered, return_indices=True)
        depth_s = zbuffer[fill_rows, fill_cols]
    else:
        depth_s = np.full((height, width), float(np.median(depth)))

    vectors = np.stack([us - pixels[:, 0], vs - pixels[:, 1]], axis=1).reshape(height, width, 2)
    valid = visible.reshape(height, width)
    if noise_sigma > 0:
        vectors = vectors + _rng(noise_seed).normal(0.0, noise_sigma, vectors.shape)

    warped = DepthMap(np.where(valid, z_s.reshape(height, width), 1.0), intrinsics, valid)
    logger.debug("Pair generated", visible_fraction=fraction, noise_sigma=noise_sigma)

    return CorrespondenceSet(
        flow_ts=FlowField(vectors, FlowKind.OPTICAL, valid),
        depth_t=scene,
        depth_s=DepthMap(depth_s, intrinsics),
        valid=valid,
        warped_depth_s=warped,
    )


def backward_flow(corr: CorrespondenceSet, motion: SE3Pose) -> FlowField:
    """
    Exact source-to-target flow evaluated at each matched source position.

    Stored on the target grid: entry p_t holds the flow leaving
    p_s = p_t + f_ts(p_t), so p_s + backward(p_t) returns to p_t.
    """
    intrinsics = corr.intrinsics
    height, width = corr.shape
    depth = corr.source_depth
    valid = corr.valid & depth.valid

    rows, cols = np.indices((height, width))
    source_u = cols + corr.flow_ts.u
    source_v = rows + corr.flow_ts.v
    pixels = np.stack([source_u, source_v, np.ones_like(source_u)], axis=-1).reshape(-1, 3)

    points_s = np.einsum("ij,nj->ni", intrinsics.K_inv, pixels) * depth.values.reshape(-1, 1)
    inverse = motion.inverse()
    points_t = np.einsum("ij,nj->ni", inverse.rotation, points_s) + inverse.translation
    z_t = points_t[:, 2]
    ok = valid.ravel() & (z_t > config.denominator_epsilon)
    projected = np.einsum("ij,nj->ni", intrinsics.K, points_t) / np.where(ok, z_t, 1.0)[:, None]

    vectors = (projected[:, :2] - pixels[:, :2]).reshape(height, width, 2)
    return FlowField(vectors, FlowKind.OPTICAL, ok.reshape(height, width))


@dataclass
class TrajectoryBundle:
    """Camera-to-world poses with the per-step motions and correspondences."""
    trajectory: Trajectory
    motions: List[SE3Pose]
    pairs: List[CorrespondenceSet]
    scene_specs: List[SceneSpec]


def generate_trajectory(
    scene_spec: SceneSpec,
    n_frames: int,
    motion_spec: MotionSpec,
    noise_sigma: float = 0.0,
    num_threads: Optional[int] = None,
) -> TrajectoryBundle:
    """
    Chain n_frames per-step motions from the start frame.

    Frame k is the target of step k and frame k-1 its source, so
    C_k = C_{k-1} * M_k; the trajectory holds C_1 .. C_n. Each step draws
    its own scene and motion from seeds spawned off the specs' seeds.

    Raises:
        SpecError: n_frames < 2
    """
    if n_frames < 2:
        raise SpecError("a trajectory needs at least 2 frames")
    num_threads = config.num_threads if num_threads is None else num_threads

    scene_seeds = np.random.SeedSequence(scene_spec.seed).spawn(n_frames)
    motion_seeds = np.random.SeedSequence(motion_spec.seed).spawn(n_frames)

    specs = [
        scene_spec.model_copy(update={"seed": int(seq.generate_state(1)[0])})
        for seq in scene_seeds
    ]
    motions = [sample_motion(motion_spec, int(seq.generate_state(1)[0])) for seq in motion_seeds]

    def make_pair(k: int) -> CorrespondenceSet:
        return generate_pair(generate_scene(specs[k]), motions[k], noise_sigma=noise_sigma, noise_seed=specs[k].seed)

    if num_threads > 1:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            pairs = list(pool.map(make_pair, range(n_frames)))
    else:
        pairs = [make_pair(k) for k in range(n_frames)]

    poses = []
    current = SE3Pose.identity()
    for motion in motions:
        current = current @ motion
        poses.append(current)

    logger.info("Trajectory generated", frames=n_frames, final_position=poses[-1].translation.tolist())
    return TrajectoryBundle(Trajectory(poses), motions, pairs, specs)


# Bundles

def write_bundle(directory: PathLike, corr: CorrespondenceSet, motion: SE3Pose,
                 metadata: Optional[Dict[str, Any]] = None) -> Dict[str, str]:
    """
    Write one correspondence set as a bundle directory.

    Returns:
        Member name to written path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / filename for name, filename in BUNDLE_MEMBERS.items()}

    write_pfm(paths["depth_t"], corr.depth_t.values)
    write_pfm(paths["depth_s"], corr.depth_s.values)
    write_pfm(paths["depth_warped"], corr.source_depth.values)
    write_flo(paths["flow"], corr.flow_ts.vectors, corr.flow_ts.valid)
    write_mask(paths["mask"], corr.valid & corr.source_depth.valid)
    write_kitti_poses(Trajectory([motion]), paths["motion"])

    scene = {"intrinsics": corr.intrinsics.model_dump()}
    scene.update(metadata or {})
    with open(paths["scene"], "w", encoding="utf-8") as f:
        json.dump(scene, f, indent=2, sort_keys=True)

    logger.info("Bundle written", directory=str(directory), valid_pixels=int(corr.valid.sum()))
    return {name: str(path) for name, path in paths.items()}


@dataclass
class SceneBundle:
    """A bundle read back from disk."""
    corr: CorrespondenceSet
    motion: SE3Pose
    metadata: Dict[str, Any]


def read_bundle(directory: PathLike) -> SceneBundle:
    """
    Read a bundle written by write_bundle.

    Raises:
        BundleError: Directory or a member is missing
        FileFormatError: A member is malformed
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise BundleError(directory, None, f"bundle directory {directory} does not exist")
    for name, filename in BUNDLE_MEMBERS.items():
        if not (directory / filename).is_file():
            raise BundleError(directory, filename, f"bundle {directory} is missing {filename}")

    scene_path = directory / BUNDLE_MEMBERS["scene"]
    try:
        with open(scene_path, "r", encoding="utf-8") as f:
            metadata = json.load(f)
        intrinsics = CameraIntrinsics(**metadata["intrinsics"])
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(scene_path, f"unreadable scene description ({e})")

    vectors, flow_valid = read_flo(directory / BUNDLE_MEMBERS["flow"])
    mask = read_mask(directory / BUNDLE_MEMBERS["mask"])
    if vectors.shape[:2] != intrinsics.shape or mask.shape != intrinsics.shape:
        raise BundleError(directory, None, f"bundle {directory} has grids that disagree with its intrinsics")
    valid = mask & flow_valid

    depth_t = DepthMap(read_pfm(directory / BUNDLE_MEMBERS["depth_t"]), intrinsics)
    depth_s = DepthMap(read_pfm(directory / BUNDLE_MEMBERS["depth_s"]), intrinsics)
    warped_values = read_pfm(directory / BUNDLE_MEMBERS["depth_warped"])
    warped = DepthMap(np.where(valid, warped_values, 1.0), intrinsics, valid & (warped_values > 0))

    motion = read_kitti_poses(directory / BUNDLE_MEMBERS["motion"]).poses[0]
    corr = CorrespondenceSet(FlowField(vectors, FlowKind.OPTICAL, flow_valid), depth_t, depth_s, valid, warped)
    return SceneBundle(corr=corr, motion=motion, metadata=metadata)
