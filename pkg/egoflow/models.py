"""
Core data models for EgoFlow.

Defines the configuration-like structures shared across modules: camera
intrinsics, scene and motion specifications, optimizer settings, loss
weights and the reports written next to every command's outputs.
Dense grids and poses live with the geometry that operates on them.
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .utils.errors import InvalidIntrinsicsError, SpecError


class FlowKind(str, Enum):
    """What produced a flow field."""
    RIGID = "rigid"
    OPTICAL = "optical"
    ROTATIONAL = "rotational"
    TANGENTIAL = "tangential"
    RADIAL = "radial"
    TRANSLATIONAL = "translational"
    COPLANAR = "coplanar"
    COAXIAL = "coaxial"


class SceneKind(str, Enum):
    """Synthetic depth layouts."""
    CONSTANT_PLANE = "constant-plane"
    SLOPED_PLANE = "sloped-plane"
    SMOOTH_RANDOM = "smooth-random"


class MotionKind(str, Enum):
    """Motion classes with a fixed zero pattern."""
    PURE_ROTATION = "pure-rotation"
    PURE_TANGENTIAL = "pure-tangential"
    PURE_RADIAL = "pure-radial"
    MIXED = "mixed"


class GradientMode(str, Enum):
    """How the refinement objective is differentiated."""
    FINITE_DIFFERENCE = "finite-difference"
    ANALYTIC_TRANSLATIONAL = "analytic-translational"


class ObjectiveTerms(str, Enum):
    """Alignment losses minimized during refinement."""
    PLA = "pla"
    AXI = "axi"
    BOTH = "both"


class TrajectoryFormat(str, Enum):
    """Pose file layouts understood by the evaluator."""
    KITTI = "kitti"
    TUM = "tum"


class CommandName(str, Enum):
    """CLI commands recorded in run manifests."""
    SIMULATE = "simulate"
    FACTOR = "factor"
    REFINE = "refine"
    EVAL = "eval"


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics; pixel coordinates are integer cell indices."""
    model_config = ConfigDict(frozen=True)

    fu: float
    fv: float
    u0: float
    v0: float
    width: int
    height: int

    @model_validator(mode="after")
    def check_invariants(self) -> "CameraIntrinsics":
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsicsError("image size must be positive")
        if not (self.fu > 0 and self.fv > 0):
            raise InvalidIntrinsicsError("focal lengths must be positive")
        if not (0 < self.u0 < self.width and 0 < self.v0 < self.height):
            raise InvalidIntrinsicsError("principal point must lie inside the image")
        return self

    @classmethod
    def kitti_like(cls, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics using the normalized KITTI camera at the given size."""
        return cls(
            fu=0.58 * width,
            fv=1.92 * height,
            u0=0.5 * width,
            v0=0.5 * height,
            width=width,
            height=height,
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.u0, self.v0])

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fu, 0.0, self.u0],
            [0.0, self.fv, self.v0],
            [0.0, 0.0, 1.0],
        ])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fu, 0.0, -self.u0 / self.fu],
            [0.0, 1.0 / self.fv, -self.v0 / self.fv],
            [0.0, 0.0, 1.0],
        ])


class SceneSpec(BaseModel):
    """Synthetic scene request."""
    kind: SceneKind = SceneKind.SMOOTH_RANDOM
    depth_range: Tuple[float, float] = (2.0, 10.0)
    resolution: Tuple[int, int] = (320, 96)
    intrinsics: Optional[CameraIntrinsics] = None
    plane_depth: Optional[float] = None
    seed: int = 0

    @model_validator(mode="after")
    def check_ranges(self) -> "SceneSpec":
        low, high = self.depth_range
        if not (low > 0 and low < high):
            raise SpecError("depth_range must satisfy 0 < min < max")
        width, height = self.resolution
        if width <= 0 or height <= 0:
            raise SpecError("resolution must be positive")
        if self.intrinsics is not None and self.intrinsics.shape != (height, width):
            raise SpecError("intrinsics size does not match resolution")
        if self.plane_depth is not None and self.plane_depth <= 0:
            raise SpecError("plane_depth must be positive")
        return self

    def camera(self) -> CameraIntrinsics:
        """Explicit intrinsics, or the KITTI-like default for the resolution."""
        if self.intrinsics is not None:
            return self.intrinsics
        return CameraIntrinsics.kitti_like(*self.resolution)


class MotionSpec(BaseModel):
    """Random ego-motion request; fixed components override sampling."""
    kind: MotionKind = MotionKind.MIXED
    max_rotation_deg: float = Field(2.0, ge=0.0)
    max_tangential: float = Field(0.3, ge=0.0)
    max_radial: float = Field(0.8, ge=0.0)
    fixed_rotvec: Optional[Tuple[float, float, float]] = None
    fixed_translation: Optional[Tuple[float, float, float]] = None
    seed: int = 0

    @model_validator(mode="after")
    def check_zero_pattern(self) -> "MotionSpec":
        rot_allowed = self.kind in (MotionKind.PURE_ROTATION, MotionKind.MIXED)
        tan_allowed = self.kind in (MotionKind.PURE_TANGENTIAL, MotionKind.MIXED)
        rad_allowed = self.kind in (MotionKind.PURE_RADIAL, MotionKind.MIXED)

        if self.fixed_rotvec is not None and not rot_allowed and any(self.fixed_rotvec):
            raise SpecError(f"{self.kind.value} motion cannot rotate")
        if self.fixed_translation is not None:
            tx, ty, tz = self.fixed_translation
            if (tx or ty) and not tan_allowed:
                raise SpecError(f"{self.kind.value} motion cannot translate tangentially")
            if tz and not rad_allowed:
                raise SpecError(f"{self.kind.value} motion cannot translate radially")
        return self


class RefineConfig(BaseModel):
    """Settings of the pose refinement; joint_step=False leaves only the block line searches."""
    max_iters: int = Field(100, gt=0)
    step_rotation: float = Field(1e-3, gt=0.0)
    step_translation: Optional[float] = Field(None, gt=0.0)
    gradient_mode: GradientMode = GradientMode.FINITE_DIFFERENCE
    convergence_tol: float = Field(1e-10, gt=0.0)
    line_search_shrink: float = Field(0.5, gt=0.0, lt=1.0)
    max_line_search: int = Field(60, gt=0)
    min_step_fraction: float = Field(1e-7, gt=0.0, lt=1.0)
    fd_step: float = Field(1e-7, gt=0.0)
    objective_terms: ObjectiveTerms = ObjectiveTerms.BOTH
    freeze_rotation: bool = False
    freeze_tangential: bool = False
    freeze_radial: bool = False
    joint_step: bool = True

    def initial_translation_step(self, translation_norm: float) -> float:
        """Configured step, or 1e-3 of the initial translation norm (floor 1e-4)."""
        if self.step_translation is not None:
            return self.step_translation
        return max(1e-3 * translation_norm, 1e-4)


STAGE_PRESETS: Dict[int, Tuple[float, float, float]] = {
    1: (0.0, 0.0, 0.01),
    2: (0.05, 0.0, 0.01),
    3: (0.05, 0.1, 0.01),
}


class LossWeights(BaseModel):
    """Weights of the total loss; alpha mixes SSIM and L1."""
    lambda1: float = Field(0.05, ge=0.0)
    lambda2: float = Field(0.1, ge=0.0)
    lambda3: float = Field(0.01, ge=0.0)
    alpha: float = Field(0.85, ge=0.0, le=1.0)

    @classmethod
    def stage(cls, n: int, alpha: float = 0.85) -> "LossWeights":
        """Progressive-training preset 1, 2 or 3."""
        if n not in STAGE_PRESETS:
            raise SpecError(f"unknown stage {n}; expected one of {sorted(STAGE_PRESETS)}")
        lambda1, lambda2, lambda3 = STAGE_PRESETS[n]
        return cls(lambda1=lambda1, lambda2=lambda2, lambda3=lambda3, alpha=alpha)


class LossReport(BaseModel):
    """All loss components and their weighted total."""
    pho: float = 0.0
    pla: float = 0.0
    axi: float = 0.0
    tan: float = 0.0
    rad: float = 0.0
    loc: float = 0.0
    total: float = 0.0
    valid_pixel_count: int = 0
    skipped_components: List[str] = Field(default_factory=list)

    @field_validator("pho", "pla", "axi", "tan", "rad", "loc", "total")
    @classmethod
    def finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("loss components must be finite")
        return v

    def to_flat_dict(self) -> Dict[str, Any]:
        """Flat JSON object with the component keys first."""
        return {
            "pho": self.pho,
            "pla": self.pla,
            "axi": self.axi,
            "tan": self.tan,
            "rad": self.rad,
            "total": self.total,
            "valid_pixel_count": self.valid_pixel_count,
            "loc": self.loc,
            "skipped_components": list(self.skipped_components),
        }


class RunManifest(BaseModel):
    """Everything needed to reproduce one command's outputs."""
    command: CommandName
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    tool_version: str


class MetricsReport(BaseModel):
    """Odometry metrics of an estimate against a reference."""
    ate: float
    e_t: Optional[float] = None
    e_r: Optional[float] = None
    n_poses: int
    n_segments: int = 0
    alignment: Dict[str, Any] = Field(default_factory=dict)
    repaired_poses: Dict[str, List[int]] = Field(default_factory=dict)
