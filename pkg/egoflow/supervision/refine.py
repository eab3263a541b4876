"""
Pose refinement by minimizing the alignment losses.

The pose is parameterized by its rotation R and the translation in the
rotation-aligned target frame, tau = R^T t. The coplanar flow depends on
(R, tau_z) only and the coaxial flow on (R, tau_x, tau_y) only.

Each iteration first tries a damped Gauss-Newton step on all active
parameters. Its residuals are the per-pixel flow components across the
direction each aligned flow should have, and they vanish exactly where
both losses do. When that step does not lower the objective, the
rotation, tangential and radial blocks get their own line searches.
Rotation increments compose on the left.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..geometry.alignment import CorrespondenceSet, aligned_flows, derotate_points, flow_from_points
from ..geometry.core import SE3Pose, check_rotation, decompose_motion, rotation_from_rotvec
from ..geometry.flow import DepthMap, FlowField, homogeneous_pixels, project
from ..models import FlowKind, GradientMode, ObjectiveTerms, RefineConfig
from ..utils.config import config
from ..utils.errors import RefinementInitError, UndefinedLossError
from ..utils.logger import get_logger
from .losses import (
    angle_gradient,
    coaxial_angles,
    coplanar_angles,
    loss_axi,
    loss_pla,
    radial_offsets,
    ratio_maps,
    recover_translation,
)

logger = get_logger(__name__)

BLOCKS = ("rotation", "tangential", "radial")
BLOCK_SIZES = {"rotation": 3, "tangential": 2, "radial": 1}
MAX_ROTATION_STEP = 0.5

# Damping of the joint step, relative to the diagonal of J^T J
INITIAL_DAMPING = 1e-3
MIN_DAMPING = 1e-9
MAX_DAMPING = 1e6
DAMPING_DECREASE = 0.2
DAMPING_INCREASE = 10.0
JOINT_LINE_SEARCH = 8


class ObjectiveValue(NamedTuple):
    pla: float
    axi: float
    total: float


@dataclass
class IterationRecord:
    """State after one refinement iteration."""
    iteration: int
    loss_pla: float
    loss_axi: float
    objective: float
    rotvec: List[float]
    translation: List[float]
    steps: Dict[str, float]

    def to_dict(self) -> Dict[str, object]:
        return {
            "iteration": self.iteration,
            "loss_pla": self.loss_pla,
            "loss_axi": self.loss_axi,
            "objective": self.objective,
            "rotvec": self.rotvec,
            "translation": self.translation,
            "steps": self.steps,
        }


@dataclass
class RefineTrace:
    """Per-iteration records, the final pose and whether refinement converged."""
    initial_pose: SE3Pose
    initial_objective: float
    final_pose: SE3Pose
    converged: bool
    records: List[IterationRecord] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def objectives(self) -> List[float]:
        return [self.initial_objective] + [record.objective for record in self.records]

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective if self.records else self.initial_objective

    def to_jsonl(self, path: Union[str, Path]) -> None:
        """One JSON object per iteration."""
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                f.write(json.dumps(record.to_dict()) + "\n")


def _flat_vectors(flow: FlowField) -> np.ndarray:
    return np.where(flow.valid[..., None], flow.vectors, 0.0).reshape(-1, 2)


def _cross(directions: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return directions[..., 0] * vectors[..., 1] - directions[..., 1] * vectors[..., 0]


class _Objective:
    """lambda (L_pla + L_axi) as a function of (R, tau) for fixed correspondences."""

    def __init__(self, corr: CorrespondenceSet, terms: ObjectiveTerms, tau_z: float):
        self.source = corr.source_points
        self.intrinsics = corr.intrinsics
        self.use_pla = terms in (ObjectiveTerms.PLA, ObjectiveTerms.BOTH)
        self.use_axi = terms in (ObjectiveTerms.AXI, ObjectiveTerms.BOTH)
        # Coaxial flow points inward when the source camera sits behind the target
        self.direction: Optional[int] = None
        if abs(tau_z) >= config.translation_epsilon:
            self.direction = -1 if tau_z > 0 else 1

        offsets = radial_offsets(self.intrinsics).reshape(-1, 2)
        lengths = np.linalg.norm(offsets, axis=-1)
        self.radial_units = np.where(
            (lengths > config.flow_epsilon)[:, None], offsets / np.maximum(lengths, 1e-300)[:, None], 0.0
        )

    def coplanar(self, derotated: np.ndarray, tau: np.ndarray):
        return flow_from_points(derotated - np.array([0.0, 0.0, tau[2]]),
                                self.source.valid, self.intrinsics, FlowKind.COPLANAR)

    def coaxial(self, derotated: np.ndarray, tau: np.ndarray):
        return flow_from_points(derotated - np.array([tau[0], tau[1], 0.0]),
                                self.source.valid, self.intrinsics, FlowKind.COAXIAL)

    @staticmethod
    def _term(evaluate, flow) -> float:
        try:
            return evaluate()
        except UndefinedLossError:
            # A vanished flow is perfectly aligned; a fully masked one is not.
            return 0.0 if int(flow.valid.sum()) >= 2 else float("inf")

    def evaluate(self, rotation: np.ndarray, tau: np.ndarray) -> ObjectiveValue:
        derotated = derotate_points(self.source, rotation)
        pla = axi = 0.0
        if self.use_pla:
            coplanar = self.coplanar(derotated, tau)
            pla = self._term(lambda: loss_pla(coplanar), coplanar)
        if self.use_axi:
            coaxial = self.coaxial(derotated, tau)
            axi = self._term(lambda: loss_axi(coaxial, self.intrinsics, self.direction), coaxial)
        return ObjectiveValue(pla, axi, pla + axi)

    def residuals(self, rotation: np.ndarray, tau: np.ndarray) -> np.ndarray:
        """
        Flow components across the expected direction, in pixels.

        Coplanar vectors are measured against the field's mean direction,
        coaxial vectors against the radial direction. The vector has a
        fixed length; pixels without a valid flow contribute 0.
        """
        derotated = derotate_points(self.source, rotation)
        parts = []
        if self.use_pla:
            vectors = _flat_vectors(self.coplanar(derotated, tau))
            mean = vectors.sum(axis=0)
            norm = float(np.linalg.norm(mean))
            parts.append(_cross(mean / norm, vectors) if norm > 0 else np.zeros(len(vectors)))
        if self.use_axi:
            parts.append(_cross(self.radial_units, _flat_vectors(self.coaxial(derotated, tau))))
        return np.concatenate(parts)

    def translation_gradient(self, rotation: np.ndarray, tau: np.ndarray) -> np.ndarray:
        """Closed-form d objective / d tau through the aligned flows."""
        derotated = derotate_points(self.source, rotation)
        fu, fv = self.intrinsics.fu, self.intrinsics.fv
        gradient = np.zeros(3)

        if self.use_pla:
            shifted = derotated - np.array([0.0, 0.0, tau[2]])
            coplanar = self.coplanar(derotated, tau)
            signed, usable = coplanar_angles(coplanar)
            if signed.size >= 2:
                points = shifted[usable]
                d_flow = np.stack([fu * points[:, 0], fv * points[:, 1]], axis=-1) / (points[:, 2:] ** 2)
                d_angle = np.sum(angle_gradient(coplanar.vectors[usable], signed) * d_flow, axis=-1)
                angles = np.abs(signed)
                gradient[2] += float(np.sum(2.0 * (angles - angles.mean()) * d_angle) / angles.size)

        if self.use_axi:
            coaxial = self.coaxial(derotated, tau)
            signed, usable, _ = coaxial_angles(coaxial, self.intrinsics, self.direction)
            if signed.size >= 1:
                depth = derotated[usable][:, 2]
                d_angle = angle_gradient(coaxial.vectors[usable], signed)
                gradient[0] += float(np.mean(d_angle[:, 0] * (-fu / depth)))
                gradient[1] += float(np.mean(d_angle[:, 1] * (-fv / depth)))

        return gradient


class _State(NamedTuple):
    rotation: np.ndarray
    tau: np.ndarray
    value: ObjectiveValue


def _move(state: _State, block: str, direction: np.ndarray, step: float) -> Tuple[np.ndarray, np.ndarray]:
    rotation, tau = state.rotation, state.tau.copy()
    if block == "rotation":
        rotation = rotation_from_rotvec(direction * step) @ rotation
    elif block == "tangential":
        tau[:2] += direction * step
    else:
        tau[2] += direction[0] * step
    return rotation, tau


def _apply_delta(state: _State, blocks: Sequence[str], delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Move every block in `blocks` by its slice of the stacked update."""
    rotation, tau = state.rotation, state.tau.copy()
    offset = 0
    for block in blocks:
        part = delta[offset:offset + BLOCK_SIZES[block]]
        offset += BLOCK_SIZES[block]
        if block == "rotation":
            rotation = rotation_from_rotvec(part) @ rotation
        elif block == "tangential":
            tau[:2] += part
        else:
            tau[2] += part[0]
    return rotation, tau


def _block_slice(block: str) -> slice:
    return {"tangential": slice(0, 2), "radial": slice(2, 3)}[block]


def _finite_difference(objective: _Objective, state: _State, block: str, step: float) -> np.ndarray:
    """Forward differences, falling back to backward ones where the forward value is not finite."""
    size = BLOCK_SIZES[block]
    gradient = np.zeros(size)
    for k in range(size):
        basis = np.zeros(size)
        basis[k] = 1.0
        forward = objective.evaluate(*_move(state, block, basis, step)).total
        if np.isfinite(forward):
            gradient[k] = (forward - state.value.total) / step
            continue
        backward = objective.evaluate(*_move(state, block, -basis, step)).total
        if np.isfinite(backward):
            gradient[k] = (state.value.total - backward) / step
    return gradient


def _residual_jacobian(objective: _Objective, state: _State, blocks: Sequence[str],
                       residual: np.ndarray, fd_steps: np.ndarray) -> np.ndarray:
    jacobian = np.empty((residual.size, fd_steps.size))
    for k, step in enumerate(fd_steps):
        delta = np.zeros(fd_steps.size)
        delta[k] = step
        jacobian[:, k] = (objective.residuals(*_apply_delta(state, blocks, delta)) - residual) / step
    return jacobian


def _joint_step(objective: _Objective, state: _State, blocks: Sequence[str], fd_steps: np.ndarray,
                damping: float, cfg: RefineConfig) -> Tuple[Optional[_State], float]:
    """
    One damped Gauss-Newton proposal, backtracked on the objective.

    Returns the accepted state, or None when no trial lowers the objective
    by more than the convergence tolerance, and the next damping.
    """
    residual = objective.residuals(state.rotation, state.tau)
    jacobian = _residual_jacobian(objective, state, blocks, residual, fd_steps)
    normal = jacobian.T @ jacobian
    gradient = jacobian.T @ residual
    if not (np.all(np.isfinite(normal)) and np.all(np.isfinite(gradient))) or not np.any(gradient):
        return None, damping

    # lstsq leaves parameters the residuals do not see at zero
    delta, *_ = np.linalg.lstsq(normal + damping * np.diag(np.diag(normal)), -gradient, rcond=None)
    if blocks[0] == "rotation":
        angle = float(np.linalg.norm(delta[:3]))
        if angle > MAX_ROTATION_STEP:
            delta = delta * (MAX_ROTATION_STEP / angle)

    fraction = 1.0
    for attempt in range(JOINT_LINE_SEARCH):
        rotation, tau = _apply_delta(state, blocks, fraction * delta)
        candidate = objective.evaluate(rotation, tau)
        if state.value.total - candidate.total > cfg.convergence_tol:
            if attempt == 0:
                damping = max(damping * DAMPING_DECREASE, MIN_DAMPING)
            return _State(rotation, tau, candidate), damping
        fraction *= cfg.line_search_shrink
    return None, min(damping * DAMPING_INCREASE, MAX_DAMPING)


def refine_pose(corr: CorrespondenceSet, init: SE3Pose, refine_config: Optional[RefineConfig] = None) -> RefineTrace:
    """
    Refine an ego-motion estimate by line-searched descent.

    Each iteration first tries the joint damped Gauss-Newton step over
    all active blocks (unless `joint_step` is off). The damping shrinks
    after a full step and grows after a failed one. If the joint step
    is not accepted, the rotation, tangential and radial blocks each step
    along their normalized negative gradient. Any step is kept only if
    the objective drops by more than the convergence tolerance. Accepted
    block steps grow by 1/shrink; a failed search shrinks the block's
    next starting step once. Refinement stops at a fixed point (nothing
    moves) or after max_iters.

    Args:
        corr: Correspondences
        init: Initial pose
        refine_config: Optimizer settings

    Returns:
        Trace with one record per iteration

    Raises:
        RefinementInitError: Objective is not finite at the initial pose
    """
    cfg = refine_config or RefineConfig()
    rotation = check_rotation(init.rotation)
    tau = rotation.T @ init.translation
    objective = _Objective(corr, cfg.objective_terms, tau[2])

    value = objective.evaluate(rotation, tau)
    if not np.isfinite(value.total):
        raise RefinementInitError("refinement objective is not finite at the initial pose")
    state = _State(rotation, tau, value)

    translation_scale = max(float(np.linalg.norm(init.translation)), 1.0)
    steps = {
        "rotation": cfg.step_rotation,
        "tangential": cfg.initial_translation_step(float(np.linalg.norm(init.translation))),
    }
    steps["radial"] = steps["tangential"]
    floors = {block: steps[block] * cfg.min_step_fraction for block in BLOCKS}
    caps = {
        "rotation": MAX_ROTATION_STEP,
        "tangential": 10.0 * translation_scale,
        "radial": 10.0 * translation_scale,
    }
    frozen = {
        "rotation": cfg.freeze_rotation,
        "tangential": cfg.freeze_tangential,
        "radial": cfg.freeze_radial,
    }
    active = [block for block in BLOCKS if not frozen[block]]

    joint = cfg.joint_step and bool(active)
    fd_steps = np.concatenate([
        np.full(BLOCK_SIZES[block], cfg.fd_step if block == "rotation" else cfg.fd_step * translation_scale)
        for block in active
    ]) if active else np.zeros(0)
    damping = INITIAL_DAMPING

    trace = RefineTrace(
        initial_pose=init,
        initial_objective=value.total,
        final_pose=init,
        converged=False,
    )
    logger.info("Refinement started", objective=value.total, blocks=active,
                gradient_mode=cfg.gradient_mode.value, joint_step=joint)

    for iteration in range(1, cfg.max_iters + 1):
        moved = False
        settled = True

        if joint:
            candidate, damping = _joint_step(objective, state, active, fd_steps, damping, cfg)
            if candidate is not None:
                state = candidate
                moved = True

        for block in ([] if moved else active):
            if block != "rotation" and cfg.gradient_mode == GradientMode.ANALYTIC_TRANSLATIONAL:
                gradient = objective.translation_gradient(state.rotation, state.tau)[_block_slice(block)]
            else:
                fd_step = cfg.fd_step if block == "rotation" else cfg.fd_step * translation_scale
                gradient = _finite_difference(objective, state, block, fd_step)

            norm = float(np.linalg.norm(gradient))
            if norm == 0.0 or not np.isfinite(norm):
                continue
            direction = -gradient / norm

            start = max(steps[block], floors[block])
            steps[block] = start
            accepted = False
            for _ in range(cfg.max_line_search):
                if steps[block] < floors[block]:
                    break
                candidate_rotation, candidate_tau = _move(state, block, direction, steps[block])
                candidate_value = objective.evaluate(candidate_rotation, candidate_tau)
                if state.value.total - candidate_value.total > cfg.convergence_tol:
                    state = _State(candidate_rotation, candidate_tau, candidate_value)
                    steps[block] = min(steps[block] / cfg.line_search_shrink, caps[block])
                    accepted = True
                    break
                steps[block] *= cfg.line_search_shrink

            if accepted:
                moved = True
            else:
                if steps[block] >= floors[block]:
                    settled = False
                steps[block] = max(start * cfg.line_search_shrink, floors[block])

        translation = state.rotation @ state.tau
        recorded_steps = dict(steps)
        if joint:
            recorded_steps["damping"] = damping
        trace.records.append(IterationRecord(
            iteration=iteration,
            loss_pla=state.value.pla,
            loss_axi=state.value.axi,
            objective=state.value.total,
            rotvec=[float(x) for x in SE3Pose(state.rotation, translation).rotvec()],
            translation=[float(x) for x in translation],
            steps=recorded_steps,
        ))
        logger.debug("Refinement iteration", iteration=iteration, objective=state.value.total,
                     pla=state.value.pla, axi=state.value.axi)

        if not moved:
            trace.converged = settled
            break

    trace.final_pose = SE3Pose(state.rotation, state.rotation @ state.tau)
    logger.info("Refinement finished", iterations=trace.iterations, converged=trace.converged,
                objective=trace.final_objective)
    return trace


class ClosedFormTranslation(NamedTuple):
    """
    Translation recovered from the ratio maps.

    `translation` is in the pose frame; `aligned` and `available` refer to
    the rotation-aligned components (tau = R^T t). Unavailable components
    fall back to the least-squares seed.
    """
    translation: np.ndarray
    aligned: np.ndarray
    available: np.ndarray
    seed: np.ndarray


def translation_seed(corr: CorrespondenceSet, rotation: np.ndarray, depth: DepthMap) -> np.ndarray:
    """
    Linear least-squares aligned translation from derotated flow.

    Undoing the rotation leaves the translational flow f, which satisfies
    f_u tau_x - (u - u0 + f_x) tau_z = f_x z and the analogue in y.
    """
    rotation = check_rotation(rotation)
    intrinsics = corr.intrinsics
    pixels = homogeneous_pixels(intrinsics)
    targets = pixels[..., :2].copy()
    pixels[..., :2] += corr.flow_ts.vectors

    rays = np.einsum("ij,hwj->hwi", intrinsics.K_inv, pixels)
    derotated = np.einsum("ji,hwj->hwi", rotation, rays)
    positions, ok = project(derotated, intrinsics, corr.valid & depth.valid)
    if not ok.any():
        raise UndefinedLossError("no valid correspondences for translation recovery")

    flow = (positions - targets)[ok]
    offsets = targets[ok] - intrinsics.principal_point
    z = depth.values[ok]
    n = flow.shape[0]

    design = np.zeros((2 * n, 3))
    design[:n, 0] = intrinsics.fu
    design[:n, 2] = -(offsets[:, 0] + flow[:, 0])
    design[n:, 1] = intrinsics.fv
    design[n:, 2] = -(offsets[:, 1] + flow[:, 1])
    rhs = np.concatenate([flow[:, 0] * z, flow[:, 1] * z])

    solution, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    return solution


def recover_translation_closed_form(corr: CorrespondenceSet, rotation: np.ndarray,
                                    depth: Optional[DepthMap] = None) -> ClosedFormTranslation:
    """
    Translation for a given rotation without iterative optimization.

    The aligned flows are built from the linear least-squares translation
    (`translation_seed`) rather than from a zero translation guess, which
    leaves no translational flow to align. Their ratio maps then give each
    component as E[z / rho]; components the maps cannot determine keep the
    least-squares value.

    Args:
        corr: Correspondences
        rotation: Rotation estimate
        depth: Target depth (defaults to the correspondence target depth)
    """
    depth = corr.depth_t if depth is None else depth
    rotation = check_rotation(rotation)
    seed = translation_seed(corr, rotation, depth)

    est = decompose_motion(SE3Pose(rotation, rotation @ seed))
    ratios = ratio_maps(aligned_flows(corr, est), corr.intrinsics)
    recovered = recover_translation(ratios, depth)

    aligned = np.where(recovered.available, recovered.translation, seed)
    if not recovered.available.all():
        logger.info("Ratio maps incomplete; using least-squares components",
                    unavailable=[axis for axis, ok in zip("xyz", recovered.available) if not ok])
    return ClosedFormTranslation(
        translation=rotation @ aligned,
        aligned=aligned,
        available=recovered.available,
        seed=seed,
    )
