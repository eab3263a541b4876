import json

import numpy as np
import pytest

from egoflow.evaluation.metrics import translation_direction_error
from egoflow.geometry.alignment import CorrespondenceSet
from egoflow.geometry.core import SE3Pose, relative_rotation_angle
from egoflow.models import GradientMode, ObjectiveTerms, RefineConfig, SceneSpec
from egoflow.simulation.scene import generate_pair, generate_scene, perturb_pose
from egoflow.supervision.refine import (
    recover_translation_closed_form,
    refine_pose,
    translation_seed,
)
from egoflow.utils.errors import RefinementInitError

from conftest import mixed_motion


@pytest.fixture
def perturbed(motion):
    return perturb_pose(motion, rotation_deg=2.0, translation_fraction=0.1, seed=3)


def _assert_monotone(trace):
    objectives = trace.objectives
    assert all(b <= a for a, b in zip(objectives, objectives[1:]))


def _rotation_error_deg(pose, motion):
    return float(np.degrees(relative_rotation_angle(pose.rotation, motion.rotation)))


def _direction_error_deg(pose, motion):
    return float(np.degrees(translation_direction_error(pose.translation, motion.translation)))


class TestRefinePose:
    def test_true_motion_is_a_fixed_point(self, corr, motion):
        trace = refine_pose(corr, motion)
        assert trace.iterations == 1
        assert trace.converged
        np.testing.assert_allclose(trace.final_pose.rotation, motion.rotation, atol=1e-12)
        np.testing.assert_allclose(trace.final_pose.translation, motion.translation, atol=1e-12)

    def test_perturbed_start_improves(self, corr, motion, perturbed):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=100))
        _assert_monotone(trace)
        assert _rotation_error_deg(perturbed, motion) == pytest.approx(2.0)
        assert _rotation_error_deg(trace.final_pose, motion) < 0.05
        assert _direction_error_deg(trace.final_pose, motion) < 0.5
        assert trace.final_objective < 1e-4

    def test_analytic_translation_gradient(self, corr, perturbed):
        config = RefineConfig(max_iters=20, gradient_mode=GradientMode.ANALYTIC_TRANSLATIONAL)
        trace = refine_pose(corr, perturbed, config)
        _assert_monotone(trace)
        assert trace.final_objective < trace.initial_objective

    def test_single_term_objective(self, corr, perturbed):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=10, objective_terms=ObjectiveTerms.PLA))
        _assert_monotone(trace)
        assert all(record.loss_axi == 0.0 for record in trace.records)

    def test_frozen_blocks_do_not_move(self, corr, perturbed):
        config = RefineConfig(freeze_rotation=True, freeze_tangential=True, freeze_radial=True)
        trace = refine_pose(corr, perturbed, config)
        assert trace.iterations == 1
        assert trace.converged
        np.testing.assert_allclose(trace.final_pose.matrix(), perturbed.matrix(), atol=1e-12)

    def test_frozen_rotation_keeps_rotation(self, corr, perturbed):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=5, freeze_rotation=True))
        np.testing.assert_allclose(trace.final_pose.rotation, perturbed.rotation, atol=1e-12)

    def test_max_iters_bounds_the_trace(self, corr, perturbed):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=2))
        assert trace.iterations <= 2

    def test_empty_correspondences(self, corr, motion):
        empty = CorrespondenceSet(
            corr.flow_ts, corr.depth_t, corr.depth_s, np.zeros(corr.shape, dtype=bool), corr.warped_depth_s
        )
        with pytest.raises(RefinementInitError):
            refine_pose(empty, motion)

    def test_trace_jsonl(self, corr, perturbed, tmp_path):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=3))
        path = tmp_path / "trace.jsonl"
        trace.to_jsonl(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == trace.iterations
        first = json.loads(lines[0])
        assert first["iteration"] == 1
        assert set(first) == {"iteration", "loss_pla", "loss_axi", "objective", "rotvec", "translation", "steps"}

    def test_block_line_searches_alone(self, corr, perturbed):
        trace = refine_pose(corr, perturbed, RefineConfig(max_iters=5, joint_step=False))
        _assert_monotone(trace)
        assert trace.final_objective < trace.initial_objective
        assert all("damping" not in record.steps for record in trace.records)


class TestRefineAccuracy:
    def test_rotation_perturbation(self, corr, motion):
        init = perturb_pose(motion, rotation_deg=2.0, seed=3)
        trace = refine_pose(corr, init, RefineConfig(max_iters=100))
        _assert_monotone(trace)
        assert _rotation_error_deg(trace.final_pose, motion) < 0.05
        assert trace.final_objective < 1e-4

    def test_translation_direction(self, corr, motion):
        init = perturb_pose(motion, translation_fraction=0.1, seed=3)
        assert _direction_error_deg(init, motion) > 5.0
        trace = refine_pose(corr, init, RefineConfig(max_iters=100))
        _assert_monotone(trace)
        assert _direction_error_deg(trace.final_pose, motion) < 0.5

    def test_seeded_scenes(self):
        motion = mixed_motion()
        passed = 0
        for seed in range(10):
            corr = generate_pair(generate_scene(SceneSpec(resolution=(160, 48), seed=seed)), motion)
            init = perturb_pose(motion, rotation_deg=2.0, translation_fraction=0.1, seed=100 + seed)
            trace = refine_pose(corr, init, RefineConfig(max_iters=100))
            final = trace.final_pose
            passed += _rotation_error_deg(final, motion) < 0.05 and _direction_error_deg(final, motion) < 0.5
        assert passed >= 9

    def test_flow_noise(self, depth, motion, perturbed):
        noisy = generate_pair(depth, motion, noise_sigma=0.5, noise_seed=5)
        trace = refine_pose(noisy, perturbed, RefineConfig(max_iters=100))
        _assert_monotone(trace)
        assert _rotation_error_deg(trace.final_pose, motion) < 0.5

    def test_radial_refinement_leaves_tangential_alone(self, corr, motion):
        # L_pla sees tau_z only, so tau_x and tau_y get no update
        tau = motion.rotation.T @ motion.translation
        shifted = tau * np.array([1.0, 1.0, 1.2])
        init = SE3Pose(motion.rotation, motion.rotation @ shifted)
        config = RefineConfig(objective_terms=ObjectiveTerms.PLA, freeze_rotation=True)
        trace = refine_pose(corr, init, config)

        final = trace.final_pose.rotation.T @ trace.final_pose.translation
        assert final[2] == pytest.approx(tau[2], abs=1e-4)
        np.testing.assert_allclose(final[:2], shifted[:2], rtol=0, atol=1e-8)


class TestClosedFormTranslation:
    def test_seed_is_exact_on_clean_data(self, corr, motion):
        seed = translation_seed(corr, motion.rotation, corr.depth_t)
        np.testing.assert_allclose(seed, motion.rotation.T @ motion.translation, rtol=1e-6)

    def test_recovered_translation(self, corr, motion):
        result = recover_translation_closed_form(corr, motion.rotation)
        assert result.available.all()
        np.testing.assert_allclose(result.translation, motion.translation, rtol=1e-6)
        np.testing.assert_allclose(result.aligned, motion.rotation.T @ motion.translation, rtol=1e-6)

    def test_rotation_error_degrades_translation(self, corr, motion):
        exact = recover_translation_closed_form(corr, motion.rotation)
        tilted = recover_translation_closed_form(corr, perturb_pose(motion, rotation_deg=2.0, seed=3).rotation)
        exact_error = np.linalg.norm(exact.translation - motion.translation)
        tilted_error = np.linalg.norm(tilted.translation - motion.translation)
        assert tilted_error > exact_error

    def test_zero_translation(self, depth, motion):
        corr = generate_pair(depth, SE3Pose(motion.rotation, np.zeros(3)))
        result = recover_translation_closed_form(corr, motion.rotation)
        assert np.max(np.abs(result.translation)) < 1e-8
