"""
Supervisory signals built on the aligned flows.

Photometric reprojection (SSIM + L1), the imaging-plane and optical-axis
alignment losses, the per-pixel depth/translation ratio maps with their
constraint-cycle losses, closed-form translation recovery, and the
weighted total.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter

from ..geometry.alignment import AlignedFlows, CorrespondenceSet, aligned_flows, inverse_warp
from ..geometry.core import MotionComponents, SE3Pose, decompose_motion
from ..geometry.flow import DepthMap, FlowField, pixel_grid
from ..models import CameraIntrinsics, LossReport, LossWeights
from ..utils.config import config
from ..utils.errors import GridShapeError, UndefinedLossError
from ..utils.logger import get_logger

logger = get_logger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

AXES = ("x", "y", "z")


class Moments(NamedTuple):
    count: int
    mean: float
    variance: float


def _chunk_moments(chunk: np.ndarray) -> Tuple[int, float, float]:
    mean = float(np.mean(chunk))
    centered = chunk - mean
    return chunk.size, mean, float(np.dot(centered, centered))


def stable_moments(
    values: np.ndarray,
    chunk_size: Optional[int] = None,
    num_threads: Optional[int] = None,
    deterministic: Optional[bool] = None,
) -> Moments:
    """
    Mean and population variance by chunked shifted accumulation.

    Each chunk contributes its own mean and centered sum of squares;
    chunks are merged in index order, so the result depends only on the
    chunk size, never on scheduling.

    Args:
        values: Samples (flattened)
        chunk_size: Samples per chunk (defaults to config)
        num_threads: Worker threads for per-chunk statistics (defaults to config)
        deterministic: Force sequential evaluation (defaults to config)

    Raises:
        UndefinedLossError: No samples
    """
    chunk_size = config.stats_chunk_size if chunk_size is None else chunk_size
    num_threads = config.num_threads if num_threads is None else num_threads
    deterministic = config.deterministic if deterministic is None else deterministic

    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise UndefinedLossError("no samples to average")

    chunks = [flat[i:i + chunk_size] for i in range(0, flat.size, chunk_size)]
    if deterministic or num_threads <= 1 or len(chunks) == 1:
        partials = [_chunk_moments(chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            partials = list(pool.map(_chunk_moments, chunks))

    count, mean, m2 = partials[0]
    for n_b, mean_b, m2_b in partials[1:]:
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta * delta * count * n_b / total
        count = total

    return Moments(count=count, mean=mean, variance=m2 / count)


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return stable_moments(values[mask]).mean


# Photometric term

def ssim_dissimilarity(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel clamp((1 - SSIM) / 2, 0, 1) with 3x3 mean pooling and mirrored borders."""
    size = (3, 3) if x.ndim == 2 else (3, 3, 1)

    def pool(a: np.ndarray) -> np.ndarray:
        return uniform_filter(a, size=size, mode="mirror")

    mu_x = pool(x)
    mu_y = pool(y)
    sigma_x = pool(x * x) - mu_x * mu_x
    sigma_y = pool(y * y) - mu_y * mu_y
    sigma_xy = pool(x * y) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return np.clip((1 - numerator / denominator) / 2, 0, 1)


def photometric_loss(target: np.ndarray, synthesized: np.ndarray, mask: np.ndarray,
                     alpha: float = 0.85) -> float:
    """
    alpha * (1 - SSIM) / 2 + (1 - alpha) * |target - synthesized|, averaged over the mask.

    Args:
        target: Target image in [0, 1], (H, W) or (H, W, C)
        synthesized: Image warped from the source view, same shape
        mask: Pixels to average over, (H, W)
        alpha: SSIM weight

    Raises:
        GridShapeError: Shapes disagree
        UndefinedLossError: Empty mask
    """
    target = np.asarray(target, dtype=np.float64)
    synthesized = np.asarray(synthesized, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != synthesized.shape or mask.shape != target.shape[:2]:
        raise GridShapeError("photometric inputs differ in shape")
    if not mask.any():
        raise UndefinedLossError("photometric loss has an empty mask")

    per_pixel = alpha * ssim_dissimilarity(target, synthesized)
    per_pixel = per_pixel + (1 - alpha) * np.abs(target - synthesized)
    if per_pixel.ndim == 3:
        per_pixel = per_pixel.mean(axis=-1)
    return _masked_mean(per_pixel, mask)


# Alignment losses

def signed_flow_angles(vectors: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Signed angle from each reference vector to each flow vector, in (-pi, pi]."""
    cross = references[..., 0] * vectors[..., 1] - references[..., 1] * vectors[..., 0]
    dot = references[..., 0] * vectors[..., 0] + references[..., 1] * vectors[..., 1]
    return np.arctan2(cross, dot)


def angle_gradient(vectors: np.ndarray, signed_angles: np.ndarray) -> np.ndarray:
    """d|angle|/d(flow) = sign(angle) * (-f_y, f_x) / |f|^2."""
    squared = np.sum(vectors * vectors, axis=-1)
    sign = np.sign(signed_angles)
    return (sign / squared)[..., None] * np.stack([-vectors[..., 1], vectors[..., 0]], axis=-1)


def _usable_flow(flow: FlowField, epsilon: float) -> np.ndarray:
    return flow.valid & (np.linalg.norm(flow.vectors, axis=-1) > epsilon)


def coplanar_angles(coplanar: FlowField, epsilon: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signed angles of usable coplanar vectors to the image x-axis.

    Returns:
        Signed angles at usable pixels and the usable mask
    """
    epsilon = config.flow_epsilon if epsilon is None else epsilon
    usable = _usable_flow(coplanar, epsilon)
    vectors = coplanar.vectors[usable]
    return signed_flow_angles(vectors, np.array([1.0, 0.0])), usable


def loss_pla(coplanar: FlowField, epsilon: Optional[float] = None) -> float:
    """
    Variance of the coplanar flow angles to the x-axis.

    The angle is arccos(e_1^T f / |f|), evaluated as |atan2| which has the
    same value and stays accurate near 0 and pi.

    Raises:
        UndefinedLossError: Fewer than two vectors longer than epsilon
    """
    angles, usable = coplanar_angles(coplanar, epsilon)
    if angles.size < 2:
        raise UndefinedLossError(f"coplanar flow has {angles.size} usable pixels, need 2")
    return stable_moments(np.abs(angles)).variance


def radial_offsets(intrinsics: CameraIntrinsics) -> np.ndarray:
    """p - p0 for every pixel, shape (H, W, 2)."""
    u, v = pixel_grid(intrinsics)
    return np.stack([u - intrinsics.u0, v - intrinsics.v0], axis=-1)


def coaxial_angles(coaxial: FlowField, intrinsics: CameraIntrinsics, direction: Optional[int] = None,
                   epsilon: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Signed angles of usable coaxial vectors to the radial direction.

    The reference is (p - p0) for outward flow (direction +1) and
    -(p - p0) for inward flow (direction -1). When `direction` is None it
    follows the majority of the field.

    Returns:
        Signed angles at usable pixels, the usable mask and the direction used
    """
    epsilon = config.flow_epsilon if epsilon is None else epsilon
    offsets = radial_offsets(intrinsics)
    if offsets.shape[:2] != coaxial.shape:
        raise GridShapeError("coaxial flow does not match intrinsics")

    usable = _usable_flow(coaxial, epsilon) & (np.linalg.norm(offsets, axis=-1) > epsilon)
    vectors = coaxial.vectors[usable]
    references = offsets[usable]

    if direction is None:
        outward = float(np.sum(vectors * references))
        direction = -1 if outward < 0 else 1
    direction = -1 if direction < 0 else 1
    return signed_flow_angles(vectors, direction * references), usable, direction


def loss_axi(coaxial: FlowField, intrinsics: CameraIntrinsics, direction: Optional[int] = None,
             epsilon: Optional[float] = None) -> float:
    """
    Mean angle between coaxial flow and the radial direction.

    Args:
        coaxial: Coaxial flow
        intrinsics: Camera whose principal point defines the radial direction
        direction: +1 compares against p - p0, -1 against p0 - p, None follows the field
        epsilon: Minimum length of both the flow and p - p0

    Raises:
        UndefinedLossError: No usable pixel
    """
    angles, _, _ = coaxial_angles(coaxial, intrinsics, direction, epsilon)
    if angles.size == 0:
        raise UndefinedLossError("coaxial flow has no usable pixels")
    return stable_moments(np.abs(angles)).mean


# Constraint cycles

@dataclass(frozen=True, eq=False)
class RatioMaps:
    """Per-pixel depth-to-translation ratios with one mask per ratio."""
    rho_x: np.ndarray
    rho_y: np.ndarray
    rho_z: np.ndarray
    valid_x: np.ndarray
    valid_y: np.ndarray
    valid_z: np.ndarray

    def ratio(self, axis: str) -> Tuple[np.ndarray, np.ndarray]:
        """Ratio grid and mask for axis 'x', 'y' or 'z'."""
        return getattr(self, f"rho_{axis}"), getattr(self, f"valid_{axis}")


def ratio_maps(flows: AlignedFlows, intrinsics: CameraIntrinsics,
               epsilon: Optional[float] = None) -> RatioMaps:
    """
    Ratios z / t per pixel from the aligned flows.

    rho_x = f_u / f_pla_x and rho_y = f_v / f_pla_y; rho_z =
    -(p - p0)^T (f_axi + p - p0) / ((p - p0)^T f_axi). Each mask drops
    pixels whose denominator is below epsilon in magnitude.
    """
    epsilon = config.flow_epsilon if epsilon is None else epsilon
    coplanar = flows.coplanar.vectors
    coaxial = flows.coaxial.vectors
    offsets = radial_offsets(intrinsics)

    def safe_ratio(numerator: np.ndarray, denominator: np.ndarray,
                   valid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ok = valid & (np.abs(denominator) >= epsilon)
        ratio = numerator / np.where(ok, denominator, 1.0)
        ok &= np.isfinite(ratio) & (ratio != 0)
        return np.where(ok, ratio, 0.0), ok

    rho_x, valid_x = safe_ratio(np.full(coplanar.shape[:2], intrinsics.fu), coplanar[..., 0],
                                flows.coplanar.valid)
    rho_y, valid_y = safe_ratio(np.full(coplanar.shape[:2], intrinsics.fv), coplanar[..., 1],
                                flows.coplanar.valid)
    rho_z, valid_z = safe_ratio(
        -np.sum(offsets * (coaxial + offsets), axis=-1),
        np.sum(offsets * coaxial, axis=-1),
        flows.coaxial.valid,
    )
    return RatioMaps(rho_x, rho_y, rho_z, valid_x, valid_y, valid_z)


class CycleTerms(NamedTuple):
    """Per-axis (pixel residual, aggregate residual) pairs and skipped axes."""
    terms: Dict[str, Tuple[float, float]]
    skipped: List[str]

    def total(self) -> float:
        return float(sum(pixel + aggregate for pixel, aggregate in self.terms.values()))


def cycle_terms(ratios: RatioMaps, depth: DepthMap, translation: Sequence[float],
                axes: Iterable[str] = AXES, epsilon: Optional[float] = None,
                skip_empty: bool = False) -> CycleTerms:
    """
    Depth-to-translation consistency per axis.

    For each axis: mean |rho t - z| / z over its mask, and
    |E[z / rho] - t| / |t|. Axes whose translation magnitude is below
    epsilon are skipped.

    Args:
        ratios: Ratio maps
        depth: Target depth estimate
        translation: Translation components indexed by axis
        axes: Axes to evaluate
        epsilon: Translation magnitude floor (defaults to config)
        skip_empty: Skip axes with an empty mask instead of raising

    Raises:
        UndefinedLossError: A non-skipped axis has an empty mask
    """
    epsilon = config.translation_epsilon if epsilon is None else epsilon
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    terms: Dict[str, Tuple[float, float]] = {}
    skipped: List[str] = []

    for axis in axes:
        t = translation[AXES.index(axis)]
        if abs(t) < epsilon:
            skipped.append(axis)
            continue
        rho, mask = ratios.ratio(axis)
        mask = mask & depth.valid
        if not mask.any():
            if skip_empty:
                skipped.append(axis)
                continue
            raise UndefinedLossError(f"ratio map {axis} has no valid pixels")
        z = depth.values[mask]
        r = rho[mask]
        pixel = stable_moments(np.abs(r * t - z) / z).mean
        aggregate = abs(stable_moments(z / r).mean - t) / abs(t)
        terms[axis] = (pixel, aggregate)

    return CycleTerms(terms=terms, skipped=skipped)


def loss_tan(ratios: RatioMaps, depth: DepthMap, t_xy: Sequence[float],
             epsilon: Optional[float] = None) -> float:
    """Tangential constraint cycles: x and y terms, pixelwise and aggregate."""
    tx, ty = np.asarray(t_xy, dtype=np.float64).reshape(2)
    return cycle_terms(ratios, depth, (tx, ty, 0.0), axes=("x", "y"), epsilon=epsilon).total()


def loss_rad(ratios: RatioMaps, depth: DepthMap, t_z: float, epsilon: Optional[float] = None) -> float:
    """Radial constraint cycle: z terms, pixelwise and aggregate."""
    return cycle_terms(ratios, depth, (0.0, 0.0, float(t_z)), axes=("z",), epsilon=epsilon).total()


class TranslationEstimate(NamedTuple):
    """Recovered translation; unavailable components are zero."""
    translation: np.ndarray
    available: np.ndarray


def recover_translation(ratios: RatioMaps, depth: DepthMap) -> TranslationEstimate:
    """(E[z / rho_x], E[z / rho_y], E[z / rho_z]), each over its own mask."""
    translation = np.zeros(3)
    available = np.zeros(3, dtype=bool)
    for i, axis in enumerate(AXES):
        rho, mask = ratios.ratio(axis)
        mask = mask & depth.valid
        if mask.any():
            translation[i] = stable_moments(depth.values[mask] / rho[mask]).mean
            available[i] = True
    return TranslationEstimate(translation, available)


# Total

def total_loss(components: Mapping[str, float], weights: LossWeights, valid_pixel_count: int = 0,
               skipped_components: Iterable[str] = ()) -> LossReport:
    """
    Weighted total; the local-structure term is fixed at zero.

    total = lambda1 (axi + pla) + lambda2 (rad + tan) + lambda3 * 0 + pho
    """
    values = {name: float(components.get(name, 0.0)) for name in ("pho", "pla", "axi", "tan", "rad")}
    loc = 0.0
    total = (
        weights.lambda1 * (values["axi"] + values["pla"])
        + weights.lambda2 * (values["rad"] + values["tan"])
        + weights.lambda3 * loc
        + values["pho"]
    )
    return LossReport(
        **values,
        loc=loc,
        total=total,
        valid_pixel_count=valid_pixel_count,
        skipped_components=list(skipped_components),
    )


def evaluate_losses(
    corr: CorrespondenceSet,
    est: Union[MotionComponents, SE3Pose],
    weights: Optional[LossWeights] = None,
    target_image: Optional[np.ndarray] = None,
    source_image: Optional[np.ndarray] = None,
    flows: Optional[AlignedFlows] = None,
    ratios: Optional[RatioMaps] = None,
) -> LossReport:
    """
    Full loss report for one correspondence set and motion estimate.

    An alignment loss is skipped when the translation component its flow
    still contains is below the translation epsilon, or when that flow
    has vanished. The photometric term needs both images.

    Args:
        corr: Correspondences
        est: Estimated motion (pose or its components)
        weights: Loss weights (stage 3 by default)
        target_image: Target image in [0, 1]
        source_image: Source image in [0, 1]
        flows: Precomputed aligned flows
        ratios: Precomputed ratio maps
    """
    weights = weights or LossWeights()
    components = decompose_motion(est) if isinstance(est, SE3Pose) else est
    flows = flows if flows is not None else aligned_flows(corr, components)
    ratios = ratios if ratios is not None else ratio_maps(flows, corr.intrinsics)
    tx, ty, tz = components.aligned_translation()
    epsilon = config.translation_epsilon

    values: Dict[str, float] = {}
    skipped: List[str] = []

    if np.hypot(tx, ty) < epsilon:
        skipped.append("pla")
    else:
        try:
            values["pla"] = loss_pla(flows.coplanar)
        except UndefinedLossError:
            skipped.append("pla")

    if abs(tz) < epsilon:
        skipped.append("axi")
    else:
        try:
            values["axi"] = loss_axi(flows.coaxial, corr.intrinsics, direction=-int(np.sign(tz)))
        except UndefinedLossError:
            skipped.append("axi")

    tan_terms = cycle_terms(ratios, corr.depth_t, (tx, ty, tz), axes=("x", "y"), skip_empty=True)
    rad_terms = cycle_terms(ratios, corr.depth_t, (tx, ty, tz), axes=("z",), skip_empty=True)
    values["tan"] = tan_terms.total()
    values["rad"] = rad_terms.total()
    skipped.extend(f"tan_{axis}" for axis in tan_terms.skipped)
    skipped.extend(f"rad_{axis}" for axis in rad_terms.skipped)

    if target_image is not None and source_image is not None:
        synthesized, warp_valid = inverse_warp(source_image, corr.flow_ts)
        values["pho"] = photometric_loss(target_image, synthesized, corr.valid & warp_valid, weights.alpha)
    else:
        skipped.append("pho")

    report = total_loss(values, weights, valid_pixel_count=int(corr.valid.sum()), skipped_components=skipped)
    logger.debug("Losses evaluated", total=report.total, skipped=skipped)
    return report
