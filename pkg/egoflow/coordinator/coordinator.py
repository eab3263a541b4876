"""
Command runner for the EgoFlow pipeline.

Each command turns scene bundles or pose files into results in a single
output directory and records a run manifest beside them.
"""

import json
import os
import tempfile
import time
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .. import __version__
from ..evaluation.metrics import (
    SEGMENT_COLUMNS,
    ate,
    kitti_rel_errors,
    segment_rows,
    translation_direction_error,
    umeyama_align,
)
from ..evaluation.trajectory_io import Trajectory, read_kitti_poses, read_tum_poses, write_kitti_poses
from ..geometry.alignment import aligned_flows
from ..geometry.core import SE3Pose, decompose_motion, relative_rotation_angle
from ..models import (
    CommandName,
    LossReport,
    LossWeights,
    MetricsReport,
    MotionSpec,
    RefineConfig,
    RunManifest,
    SceneSpec,
    TrajectoryFormat,
)
from ..simulation.scene import (
    generate_pair,
    generate_scene,
    generate_trajectory,
    perturb_pose,
    read_bundle,
    sample_motion,
    write_bundle,
)
from ..supervision.losses import AXES, evaluate_losses, ratio_maps
from ..supervision.refine import RefineTrace, refine_pose
from ..utils.config import config
from ..utils.errors import NoSegmentsError
from ..utils.formats import write_flo, write_mask, write_pfm
from ..utils.logger import get_logger, log_performance_metric

logger = get_logger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


def write_text_atomic(path: PathLike, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def write_json_atomic(path: PathLike, payload: Dict[str, Any]) -> None:
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: PathLike) -> RunManifest:
    """Load a manifest written by a previous run."""
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest.model_validate_json(f.read())


class Coordinator:
    """
    Runs the simulate, factor, refine and eval commands.

    Every command returns its main result and leaves a manifest.json in
    its output directory. Output paths in the manifest are relative to
    that directory so manifests compare equal across locations.
    """

    def __init__(self):
        """Initialize the coordinator with the global configuration."""
        self.config = config
        self.logger = logger
        self.tool_version = __version__

        self.logger.debug("Coordinator initialized", tool_version=self.tool_version)

    def _finish(self, command: CommandName, out_dir: Path, started: float, settings: Dict[str, Any],
                seeds: Dict[str, int], inputs: Dict[str, Optional[str]], outputs: Dict[str, str]) -> RunManifest:
        manifest = RunManifest(
            command=command,
            config=settings,
            seeds=seeds,
            inputs={name: str(path) for name, path in inputs.items() if path is not None},
            outputs=outputs,
            tool_version=self.tool_version,
        )
        write_json_atomic(out_dir / MANIFEST_NAME, manifest.model_dump(mode="json"))

        duration = time.perf_counter() - started
        log_performance_metric(f"{command.value}_duration", duration, "seconds",
                               {"out_dir": str(out_dir)})
        self.logger.info("Command finished", command=command.value, outputs=len(outputs))
        return manifest

    # simulate

    def simulate(
        self,
        scene_spec: SceneSpec,
        motion_spec: MotionSpec,
        out_dir: PathLike,
        n_frames: int = 1,
        noise_sigma: float = 0.0,
        settings: Optional[Dict[str, Any]] = None,
    ) -> RunManifest:
        """
        Write one scene bundle, or a trajectory of bundles.

        With n_frames = 1 the bundle lands directly in out_dir. Otherwise
        out_dir holds poses.txt (camera-to-world, KITTI format) and one
        bundle per step in frame_0001, frame_0002, ...
        """
        started = time.perf_counter()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.logger.info("Simulating", kind=scene_spec.kind.value, motion=motion_spec.kind.value,
                         frames=n_frames, out_dir=str(out_dir))

        specs = {
            "scene": scene_spec.model_dump(mode="json"),
            "motion": motion_spec.model_dump(mode="json"),
            "noise_sigma": noise_sigma,
        }
        outputs: Dict[str, str] = {}

        if n_frames == 1:
            motion = sample_motion(motion_spec)
            corr = generate_pair(generate_scene(scene_spec), motion,
                                 noise_sigma=noise_sigma, noise_seed=scene_spec.seed)
            written = write_bundle(out_dir, corr, motion, specs)
            outputs.update({name: Path(path).name for name, path in written.items()})
        else:
            bundle = generate_trajectory(scene_spec, n_frames, motion_spec, noise_sigma=noise_sigma,
                                         num_threads=self.config.num_threads)
            poses_path = out_dir / "poses.txt"
            write_kitti_poses(bundle.trajectory, poses_path)
            outputs["poses"] = poses_path.name
            for k, (corr, motion, spec) in enumerate(zip(bundle.pairs, bundle.motions, bundle.scene_specs), start=1):
                frame = f"frame_{k:04d}"
                metadata = dict(specs, frame=k, scene=spec.model_dump(mode="json"))
                write_bundle(out_dir / frame, corr, motion, metadata)
                outputs[frame] = frame

        settings = settings if settings is not None else dict(specs, frames=n_frames)
        seeds = {"scene": scene_spec.seed, "motion": motion_spec.seed}
        return self._finish(CommandName.SIMULATE, out_dir, started, settings, seeds, {}, outputs)

    # factor

    def factor(
        self,
        bundle_dir: PathLike,
        out_dir: PathLike,
        pose: Optional[SE3Pose] = None,
        weights: Optional[LossWeights] = None,
        target_image: Optional[np.ndarray] = None,
        source_image: Optional[np.ndarray] = None,
        settings: Optional[Dict[str, Any]] = None,
        inputs: Optional[Dict[str, Optional[str]]] = None,
    ) -> Tuple[LossReport, RunManifest]:
        """
        Aligned flows, ratio maps and the loss report for a pose estimate.

        Args:
            bundle_dir: Scene bundle
            out_dir: Output directory
            pose: Estimated motion (the bundle's ground truth when omitted)
            weights: Loss weights
            target_image: Target image for the photometric term
            source_image: Source image for the photometric term
            settings: Resolved settings recorded in the manifest
            inputs: Input paths recorded in the manifest
        """
        started = time.perf_counter()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        weights = weights or LossWeights()

        bundle = read_bundle(bundle_dir)
        corr = bundle.corr
        estimate = pose if pose is not None else bundle.motion
        self.logger.info("Factoring flow", bundle=str(bundle_dir), ground_truth_pose=pose is None)

        components = decompose_motion(estimate)
        flows = aligned_flows(corr, components)
        ratios = ratio_maps(flows, corr.intrinsics)
        report = evaluate_losses(corr, components, weights, target_image, source_image, flows, ratios)

        outputs: Dict[str, str] = {}
        for name, flow in (("coplanar", flows.coplanar), ("coaxial", flows.coaxial)):
            write_flo(out_dir / f"{name}.flo", flow.vectors, flow.valid)
            outputs[name] = f"{name}.flo"
        for axis in AXES:
            rho, valid = ratios.ratio(axis)
            write_pfm(out_dir / f"rho_{axis}.pfm", np.where(valid, rho, 0.0))
            write_mask(out_dir / f"rho_{axis}_mask.pgm", valid)
            outputs[f"rho_{axis}"] = f"rho_{axis}.pfm"
            outputs[f"rho_{axis}_mask"] = f"rho_{axis}_mask.pgm"

        write_json_atomic(out_dir / "loss_report.json", report.to_flat_dict())
        outputs["loss_report"] = "loss_report.json"

        settings = settings if settings is not None else {"weights": weights.model_dump()}
        inputs = dict(inputs or {}, bundle=str(bundle_dir))
        manifest = self._finish(CommandName.FACTOR, out_dir, started, settings, {}, inputs, outputs)
        return report, manifest

    # refine

    def refine(
        self,
        bundle_dir: PathLike,
        out_dir: PathLike,
        init: Optional[SE3Pose] = None,
        refine_config: Optional[RefineConfig] = None,
        perturb_rotation_deg: float = 0.0,
        perturb_translation: float = 0.0,
        perturb_seed: int = 0,
        settings: Optional[Dict[str, Any]] = None,
        inputs: Optional[Dict[str, Optional[str]]] = None,
    ) -> Tuple[RefineTrace, RunManifest]:
        """
        Refine a pose on a bundle and write the result with its trace.

        The initial pose is `init` (the bundle's ground truth when omitted),
        optionally perturbed by a rotation of perturb_rotation_deg and a
        translation offset of perturb_translation * |t|.
        """
        started = time.perf_counter()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        refine_config = refine_config or RefineConfig()

        bundle = read_bundle(bundle_dir)
        start = init if init is not None else bundle.motion
        if perturb_rotation_deg or perturb_translation:
            start = perturb_pose(start, perturb_rotation_deg, perturb_translation, perturb_seed)

        trace = refine_pose(bundle.corr, start, refine_config)
        final = trace.final_pose

        pose_path = out_dir / "refined_pose.txt"
        write_kitti_poses(Trajectory([final]), pose_path)
        trace.to_jsonl(out_dir / "trace.jsonl")

        truth = bundle.motion
        direction_error = translation_direction_error(final.translation, truth.translation)
        summary = {
            "converged": trace.converged,
            "iterations": trace.iterations,
            "initial_objective": trace.initial_objective,
            "final_objective": trace.final_objective,
            "rotation_error_deg": float(np.degrees(relative_rotation_angle(final.rotation, truth.rotation))),
            "translation_direction_error_deg": (
                None if direction_error is None else float(np.degrees(direction_error))
            ),
        }
        write_json_atomic(out_dir / "refine_summary.json", summary)
        self.logger.info("Refined pose", **summary)

        outputs = {
            "refined_pose": pose_path.name,
            "trace": "trace.jsonl",
            "summary": "refine_summary.json",
        }
        settings = settings if settings is not None else refine_config.model_dump(mode="json")
        inputs = dict(inputs or {}, bundle=str(bundle_dir))
        seeds = {"perturb": perturb_seed}
        manifest = self._finish(CommandName.REFINE, out_dir, started, settings, seeds, inputs, outputs)
        return trace, manifest

    # eval

    def evaluate(
        self,
        estimate_path: PathLike,
        reference_path: PathLike,
        out_dir: PathLike,
        trajectory_format: TrajectoryFormat = TrajectoryFormat.KITTI,
        settings: Optional[Dict[str, Any]] = None,
    ) -> Tuple[MetricsReport, RunManifest]:
        """
        ATE after 7-DoF alignment and KITTI relative errors.

        A reference path shorter than every segment length leaves e_t and
        e_r empty and the segment table without rows.
        """
        started = time.perf_counter()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        reader = read_tum_poses if trajectory_format == TrajectoryFormat.TUM else read_kitti_poses
        estimate = reader(estimate_path)
        reference = reader(reference_path)
        self.logger.info("Evaluating trajectory", poses=len(estimate), format=trajectory_format.value)

        alignment = umeyama_align(estimate, reference, strict=False)
        rows = np.empty((0, len(SEGMENT_COLUMNS)))
        e_t = e_r = None
        n_segments = 0
        try:
            relative = kitti_rel_errors(estimate, reference)
            e_t, e_r = relative.e_t, relative.e_r
            rows = segment_rows(relative)
            n_segments = len(relative.segments)
        except NoSegmentsError as e:
            self.logger.warning("Relative errors unavailable", reason=str(e))

        report = MetricsReport(
            ate=ate(estimate, reference),
            e_t=e_t,
            e_r=e_r,
            n_poses=len(estimate),
            n_segments=n_segments,
            alignment=alignment.to_dict(),
            repaired_poses={
                name: list(trajectory.repaired)
                for name, trajectory in (("estimate", estimate), ("reference", reference))
                if trajectory.repaired
            },
        )
        write_json_atomic(out_dir / "metrics.json", report.model_dump(mode="json"))
        np.savetxt(out_dir / "segments.csv", rows, delimiter=",", fmt="%.10g",
                   header=",".join(SEGMENT_COLUMNS), comments="")

        outputs = {"metrics": "metrics.json", "segments": "segments.csv"}
        settings = settings if settings is not None else {"format": trajectory_format.value}
        inputs = {"estimate": str(estimate_path), "reference": str(reference_path)}
        manifest = self._finish(CommandName.EVAL, out_dir, started, settings, {}, inputs, outputs)
        return report, manifest
