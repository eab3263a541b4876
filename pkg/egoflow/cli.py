"""
Command-line interface for EgoFlow.

Four commands: simulate (scene bundles), factor (aligned flows and the
loss report), refine (pose refinement) and eval (trajectory metrics).
Settings resolve as: command-line flags, then --manifest, then defaults.
"""

import argparse
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from . import __version__
from .coordinator import Coordinator
from .coordinator.coordinator import read_manifest
from .evaluation.trajectory_io import read_kitti_poses
from .models import (
    CommandName,
    GradientMode,
    LossWeights,
    MotionKind,
    MotionSpec,
    ObjectiveTerms,
    RefineConfig,
    SceneKind,
    SceneSpec,
    TrajectoryFormat,
)
from .utils.errors import EgoFlowError, SpecError
from .utils.formats import read_image
from .utils.logger import get_logger, log_error, setup_logging

logger = get_logger(__name__)

console = Console()
error_console = Console(stderr=True)

SIMULATE_DEFAULTS: Dict[str, Any] = {
    "kind": SceneKind.SMOOTH_RANDOM.value,
    "depth": None,
    "depth_min": 2.0,
    "depth_max": 10.0,
    "width": 320,
    "height": 96,
    "motion": MotionKind.MIXED.value,
    "tx": None,
    "ty": None,
    "tz": None,
    "rx": None,
    "ry": None,
    "rz": None,
    "max_rotation": 2.0,
    "max_tangential": 0.3,
    "max_radial": 0.8,
    "seed": 0,
    "motion_seed": None,
    "frames": 1,
    "noise_sigma": 0.0,
}

FACTOR_DEFAULTS: Dict[str, Any] = {
    "bundle": None,
    "pose": None,
    "stage": 3,
    "lambda1": None,
    "lambda2": None,
    "lambda3": None,
    "alpha": 0.85,
    "target_image": None,
    "source_image": None,
}

REFINE_DEFAULTS: Dict[str, Any] = {
    "bundle": None,
    "init": None,
    "perturb_rotation": 0.0,
    "perturb_translation": 0.0,
    "perturb_seed": 0,
    "max_iters": 100,
    "step_rotation": 1e-3,
    "step_translation": None,
    "gradient_mode": GradientMode.FINITE_DIFFERENCE.value,
    "tol": 1e-10,
    "shrink": 0.5,
    "objective": ObjectiveTerms.BOTH.value,
    "freeze_rotation": None,
    "freeze_tangential": None,
    "freeze_radial": None,
    "block_only": None,
}

EVAL_DEFAULTS: Dict[str, Any] = {
    "estimate": None,
    "reference": None,
    "format": TrajectoryFormat.KITTI.value,
}

DEFAULTS = {
    CommandName.SIMULATE: SIMULATE_DEFAULTS,
    CommandName.FACTOR: FACTOR_DEFAULTS,
    CommandName.REFINE: REFINE_DEFAULTS,
    CommandName.EVAL: EVAL_DEFAULTS,
}


def positive_int(value: str) -> int:
    number = int(value)
    if number <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--manifest", help="Manifest of an earlier run supplying unset options")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egoflow",
        description="Ego-motion flow factorization, pose refinement and trajectory metrics.",
    )
    parser.add_argument("--version", action="version", version=f"egoflow {__version__}")
    parser.add_argument("--log-level", help="Override EGOFLOW_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Generate a synthetic scene bundle")
    simulate.add_argument("--kind", choices=[k.value for k in SceneKind])
    simulate.add_argument("--depth", type=float, help="Plane depth for constant-plane scenes")
    simulate.add_argument("--depth-min", type=float)
    simulate.add_argument("--depth-max", type=float)
    simulate.add_argument("--width", type=positive_int)
    simulate.add_argument("--height", type=positive_int)
    simulate.add_argument("--motion", choices=[k.value for k in MotionKind])
    for axis in "xyz":
        simulate.add_argument(f"--t{axis}", type=float, help=f"Fixed translation along {axis}")
    for axis in "xyz":
        simulate.add_argument(f"--r{axis}", type=float, help=f"Fixed rotation vector component {axis} (degrees)")
    simulate.add_argument("--max-rotation", type=float, help="Rotation bound in degrees")
    simulate.add_argument("--max-tangential", type=float)
    simulate.add_argument("--max-radial", type=float)
    simulate.add_argument("--seed", type=int, help="Scene seed")
    simulate.add_argument("--motion-seed", type=int, help="Motion seed (defaults to --seed)")
    simulate.add_argument("--frames", type=positive_int, help="1 for a single pair, more for a trajectory")
    simulate.add_argument("--noise-sigma", type=float, help="Gaussian flow noise in pixels")
    _common(simulate)

    factor = commands.add_parser("factor", help="Aligned flows, ratio maps and loss report")
    factor.add_argument("bundle", nargs="?", help="Scene bundle directory")
    factor.add_argument("--pose", help="Estimated motion, one KITTI line (ground truth when omitted)")
    factor.add_argument("--stage", type=int, choices=[1, 2, 3], help="Loss weight preset")
    factor.add_argument("--lambda1", type=float)
    factor.add_argument("--lambda2", type=float)
    factor.add_argument("--lambda3", type=float)
    factor.add_argument("--alpha", type=float)
    factor.add_argument("--target-image")
    factor.add_argument("--source-image")
    _common(factor)

    refine = commands.add_parser("refine", help="Refine a pose on a scene bundle")
    refine.add_argument("bundle", nargs="?", help="Scene bundle directory")
    refine.add_argument("--init", help="Initial motion, one KITTI line (ground truth when omitted)")
    refine.add_argument("--perturb-rotation", type=float, help="Rotation perturbation in degrees")
    refine.add_argument("--perturb-translation", type=float, help="Translation perturbation as a fraction of |t|")
    refine.add_argument("--perturb-seed", type=int)
    refine.add_argument("--max-iters", type=positive_int)
    refine.add_argument("--step-rotation", type=float)
    refine.add_argument("--step-translation", type=float)
    refine.add_argument("--gradient-mode", choices=[m.value for m in GradientMode])
    refine.add_argument("--tol", type=float)
    refine.add_argument("--shrink", type=float)
    refine.add_argument("--objective", choices=[t.value for t in ObjectiveTerms])
    for block in ("rotation", "tangential", "radial"):
        refine.add_argument(f"--freeze-{block}", action="store_const", const=True)
    refine.add_argument("--block-only", action="store_const", const=True,
                        help="Skip the joint Gauss-Newton step and use block line searches only")
    _common(refine)

    evaluate = commands.add_parser("eval", help="ATE and KITTI relative errors")
    evaluate.add_argument("estimate", nargs="?", help="Estimated trajectory")
    evaluate.add_argument("reference", nargs="?", help="Reference trajectory")
    evaluate.add_argument("--format", choices=[f.value for f in TrajectoryFormat])
    _common(evaluate)

    return parser


def resolve_settings(command: CommandName, args: argparse.Namespace) -> Dict[str, Any]:
    """Flags over manifest values over defaults."""
    defaults = DEFAULTS[command]
    settings = dict(defaults)

    if args.manifest:
        manifest = read_manifest(args.manifest)
        if manifest.command != command:
            raise SpecError(f"manifest {args.manifest} was written by '{manifest.command.value}', "
                            f"not '{command.value}'")
        settings.update({key: value for key, value in manifest.config.items() if key in defaults})

    flags = vars(args)
    settings.update({key: flags[key] for key in defaults if flags.get(key) is not None})
    return settings


def _read_single_pose(path: Optional[str]):
    return read_kitti_poses(path).poses[0] if path else None


def _require(parser: argparse.ArgumentParser, settings: Dict[str, Any], *keys: str) -> None:
    missing = [key for key in keys if settings.get(key) is None]
    if missing:
        parser.error(f"missing required argument(s): {', '.join(missing)}")


def run_simulate(coordinator: Coordinator, settings: Dict[str, Any], out: str) -> None:
    seed = settings["seed"]
    motion_seed = seed if settings["motion_seed"] is None else settings["motion_seed"]

    translation = [settings[f"t{axis}"] for axis in "xyz"]
    rotation = [settings[f"r{axis}"] for axis in "xyz"]
    fixed_translation = None
    if any(value is not None for value in translation):
        fixed_translation = tuple(value or 0.0 for value in translation)
    fixed_rotvec = None
    if any(value is not None for value in rotation):
        fixed_rotvec = tuple(float(np.deg2rad(value or 0.0)) for value in rotation)

    scene_spec = SceneSpec(
        kind=SceneKind(settings["kind"]),
        depth_range=(settings["depth_min"], settings["depth_max"]),
        resolution=(settings["width"], settings["height"]),
        plane_depth=settings["depth"],
        seed=seed,
    )
    motion_spec = MotionSpec(
        kind=MotionKind(settings["motion"]),
        max_rotation_deg=settings["max_rotation"],
        max_tangential=settings["max_tangential"],
        max_radial=settings["max_radial"],
        fixed_rotvec=fixed_rotvec,
        fixed_translation=fixed_translation,
        seed=motion_seed,
    )
    coordinator.simulate(scene_spec, motion_spec, out, n_frames=settings["frames"],
                         noise_sigma=settings["noise_sigma"], settings=settings)
    console.print(f"Scene bundle written to [bold]{out}[/bold]")


def run_factor(coordinator: Coordinator, settings: Dict[str, Any], out: str) -> None:
    preset = LossWeights.stage(settings["stage"], alpha=settings["alpha"])
    overrides = {key: settings[key] for key in ("lambda1", "lambda2", "lambda3") if settings[key] is not None}
    weights = LossWeights(**dict(preset.model_dump(), **overrides))

    target_image = read_image(settings["target_image"]) if settings["target_image"] else None
    source_image = read_image(settings["source_image"]) if settings["source_image"] else None

    inputs = {
        "pose": settings["pose"],
        "target_image": settings["target_image"],
        "source_image": settings["source_image"],
    }
    report, _ = coordinator.factor(
        settings["bundle"], out,
        pose=_read_single_pose(settings["pose"]),
        weights=weights,
        target_image=target_image,
        source_image=source_image,
        settings=settings,
        inputs=inputs,
    )

    table = Table(title="Loss report")
    table.add_column("component")
    table.add_column("value", justify="right")
    for name in ("pho", "pla", "axi", "tan", "rad", "total"):
        skipped = name in report.skipped_components
        table.add_row(name, "skipped" if skipped else f"{getattr(report, name):.6g}")
    console.print(table)


def run_refine(coordinator: Coordinator, settings: Dict[str, Any], out: str) -> None:
    refine_config = RefineConfig(
        max_iters=settings["max_iters"],
        step_rotation=settings["step_rotation"],
        step_translation=settings["step_translation"],
        gradient_mode=GradientMode(settings["gradient_mode"]),
        convergence_tol=settings["tol"],
        line_search_shrink=settings["shrink"],
        objective_terms=ObjectiveTerms(settings["objective"]),
        freeze_rotation=bool(settings["freeze_rotation"]),
        freeze_tangential=bool(settings["freeze_tangential"]),
        freeze_radial=bool(settings["freeze_radial"]),
        joint_step=not settings["block_only"],
    )
    trace, _ = coordinator.refine(
        settings["bundle"], out,
        init=_read_single_pose(settings["init"]),
        refine_config=refine_config,
        perturb_rotation_deg=settings["perturb_rotation"],
        perturb_translation=settings["perturb_translation"],
        perturb_seed=settings["perturb_seed"],
        settings=settings,
        inputs={"init": settings["init"]},
    )
    status = "converged" if trace.converged else "stopped at max iterations"
    console.print(f"Refinement {status} after {trace.iterations} iteration(s); "
                  f"objective {trace.initial_objective:.6g} -> {trace.final_objective:.6g}")


def run_eval(coordinator: Coordinator, settings: Dict[str, Any], out: str) -> None:
    report, _ = coordinator.evaluate(
        settings["estimate"], settings["reference"], out,
        trajectory_format=TrajectoryFormat(settings["format"]),
        settings=settings,
    )

    table = Table(title="Trajectory metrics")
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_row("ATE (m)", f"{report.ate:.6g}")
    table.add_row("e_t (%)", "n/a" if report.e_t is None else f"{report.e_t:.6g}")
    table.add_row("e_r (deg/100m)", "n/a" if report.e_r is None else f"{report.e_r:.6g}")
    table.add_row("segments", str(report.n_segments))
    console.print(table)


RUNNERS = {
    CommandName.SIMULATE: (run_simulate, ()),
    CommandName.FACTOR: (run_factor, ("bundle",)),
    CommandName.REFINE: (run_refine, ("bundle",)),
    CommandName.EVAL: (run_eval, ("estimate", "reference")),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 1 on a computation or I/O error, 2 on a usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.log_level:
        setup_logging(log_level=args.log_level)

    command = CommandName(args.command)
    runner, required = RUNNERS[command]
    logger.info("Command started", command=command.value)

    try:
        settings = resolve_settings(command, args)
        try:
            _require(parser, settings, *required)
        except SystemExit as e:
            return int(e.code or 0)
        runner(Coordinator(), settings, args.out)
    except (EgoFlowError, ValidationError, OSError) as e:
        log_error(e, {"command": command.value})
        error_console.print(f"[red]error:[/red] {escape(_one_line(e))}", soft_wrap=True, highlight=False)
        return 1
    return 0


def _one_line(error: Exception) -> str:
    lines: List[str] = [line.strip() for line in str(error).splitlines() if line.strip()]
    return " ".join(lines) if lines else type(error).__name__


if __name__ == "__main__":
    sys.exit(main())
