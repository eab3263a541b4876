import numpy as np
import pytest
from pydantic import ValidationError

from egoflow.geometry.alignment import aligned_flows, inverse_warp
from egoflow.geometry.core import SE3Pose, decompose_motion
from egoflow.geometry.flow import FlowField, radial_flow, tangential_flow
from egoflow.models import FlowKind, LossReport, LossWeights
from egoflow.simulation.scene import perturb_pose
from egoflow.supervision.losses import (
    angle_gradient,
    cycle_terms,
    evaluate_losses,
    loss_axi,
    loss_pla,
    loss_rad,
    loss_tan,
    photometric_loss,
    ratio_maps,
    recover_translation,
    signed_flow_angles,
    ssim_dissimilarity,
    stable_moments,
    total_loss,
)
from egoflow.utils.errors import GridShapeError, SpecError, UndefinedLossError


@pytest.fixture
def gt_flows(corr, motion):
    return aligned_flows(corr, decompose_motion(motion))


@pytest.fixture
def tau(motion):
    return motion.rotation.T @ motion.translation


class TestStableMoments:
    def test_matches_numpy(self, rng):
        values = rng.normal(1e6, 1.0, size=100_000)
        moments = stable_moments(values, chunk_size=1000)
        assert moments.count == values.size
        assert moments.mean == pytest.approx(np.mean(values), rel=1e-12)
        assert moments.variance == pytest.approx(np.var(values), rel=1e-8)

    def test_threads_do_not_change_the_result(self, rng):
        values = rng.normal(size=50_000)
        sequential = stable_moments(values, chunk_size=777, num_threads=1, deterministic=True)
        threaded = stable_moments(values, chunk_size=777, num_threads=4, deterministic=False)
        assert sequential == threaded

    def test_empty_input(self):
        with pytest.raises(UndefinedLossError):
            stable_moments(np.array([]))


class TestPhotometric:
    def test_identical_images(self, rng):
        image = rng.uniform(size=(20, 30, 3))
        np.testing.assert_allclose(ssim_dissimilarity(image, image), 0.0, atol=1e-12)
        assert photometric_loss(image, image, np.ones((20, 30), dtype=bool)) == pytest.approx(0.0, abs=1e-12)

    def test_alpha_zero_is_l1(self, rng):
        image = rng.uniform(size=(20, 30))
        mask = np.ones((20, 30), dtype=bool)
        assert photometric_loss(image, image + 0.1, mask, alpha=0.0) == pytest.approx(0.1)

    def test_dissimilarity_is_bounded(self, rng):
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        d = ssim_dissimilarity(a, b)
        assert d.min() >= 0.0 and d.max() <= 1.0

    def test_empty_mask(self):
        image = np.zeros((8, 8))
        with pytest.raises(UndefinedLossError):
            photometric_loss(image, image, np.zeros((8, 8), dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(GridShapeError):
            photometric_loss(np.zeros((8, 8)), np.zeros((8, 9)), np.ones((8, 8), dtype=bool))


class TestAlignmentLosses:
    def test_tangential_flow_has_no_angle_spread(self, depth):
        assert loss_pla(tangential_flow(depth, [0.3, 0.1])) < 1e-20

    def test_mixed_flow_spreads_angles(self, depth):
        mixed = FlowField(
            tangential_flow(depth, [0.3, 0.1]).vectors + radial_flow(depth, 0.4).vectors,
            FlowKind.COPLANAR,
            np.ones(depth.shape, dtype=bool),
        )
        assert loss_pla(mixed) > 1e-3

    def test_pla_needs_two_vectors(self, depth):
        zero = FlowField(np.zeros(depth.shape + (2,)), FlowKind.COPLANAR, np.ones(depth.shape, dtype=bool))
        with pytest.raises(UndefinedLossError):
            loss_pla(zero)

    def test_radial_flow_points_along_the_axis(self, depth):
        inward = radial_flow(depth, 0.5)
        assert loss_axi(inward, depth.intrinsics, direction=-1) < 1e-12
        assert loss_axi(inward, depth.intrinsics) < 1e-12
        assert loss_axi(inward, depth.intrinsics, direction=1) == pytest.approx(np.pi)

    def test_outward_flow(self, depth):
        outward = radial_flow(depth, -0.5)
        assert loss_axi(outward, depth.intrinsics, direction=1) < 1e-12

    def test_axi_needs_a_vector(self, depth):
        zero = FlowField(np.zeros(depth.shape + (2,)), FlowKind.COAXIAL, np.ones(depth.shape, dtype=bool))
        with pytest.raises(UndefinedLossError):
            loss_axi(zero, depth.intrinsics)

    def test_two_angle_field(self):
        vectors = np.zeros((4, 6, 2))
        vectors[:2, :, 0] = 1.0
        vectors[2:, :, 1] = 3.0
        field = FlowField(vectors, FlowKind.COPLANAR, np.ones((4, 6), dtype=bool))
        assert loss_pla(field) == pytest.approx((np.pi / 4) ** 2, rel=1e-12)

    def test_pla_ignores_global_scale(self, depth):
        vectors = tangential_flow(depth, [0.3, 0.1]).vectors + radial_flow(depth, 0.4).vectors
        valid = np.ones(depth.shape, dtype=bool)
        reference = loss_pla(FlowField(vectors, FlowKind.COPLANAR, valid))
        for scale in (0.5, 3.0):
            scaled = loss_pla(FlowField(scale * vectors, FlowKind.COPLANAR, valid))
            assert scaled == pytest.approx(reference, rel=1e-12)

    def test_axi_ignores_per_pixel_scale(self, depth, rng):
        vectors = radial_flow(depth, 0.5).vectors + tangential_flow(depth, [0.05, -0.02]).vectors
        valid = np.ones(depth.shape, dtype=bool)
        reference = loss_axi(FlowField(vectors, FlowKind.COAXIAL, valid), depth.intrinsics, direction=-1)
        scales = rng.uniform(0.5, 2.0, size=depth.shape)
        rescaled = FlowField(scales[..., None] * vectors, FlowKind.COAXIAL, valid)
        assert reference > 1e-3
        assert loss_axi(rescaled, depth.intrinsics, direction=-1) == pytest.approx(reference, rel=1e-12)

    def test_signed_angles(self):
        vectors = np.array([[0.0, 1.0], [-1.0, 0.0], [1.0, -1.0]])
        angles = signed_flow_angles(vectors, np.array([1.0, 0.0]))
        np.testing.assert_allclose(angles, [np.pi / 2, np.pi, -np.pi / 4])

    def test_angle_gradient_matches_finite_differences(self, rng):
        vectors = rng.normal(size=(50, 2))
        reference = np.array([1.0, 0.0])
        analytic = angle_gradient(vectors, signed_flow_angles(vectors, reference))
        h = 1e-7
        for component in range(2):
            step = np.zeros(2)
            step[component] = h
            plus = np.abs(signed_flow_angles(vectors + step, reference))
            minus = np.abs(signed_flow_angles(vectors - step, reference))
            np.testing.assert_allclose(analytic[:, component], (plus - minus) / (2 * h), atol=1e-5)


class TestRatioMaps:
    def test_ratios_reproduce_depth(self, corr, gt_flows, tau):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        z = corr.depth_t.values
        for i, axis in enumerate("xyz"):
            rho, mask = ratios.ratio(axis)
            assert mask.mean() > 0.5
            np.testing.assert_allclose(rho[mask] * tau[i], z[mask], rtol=1e-6)

    def test_masks_are_independent(self, corr, gt_flows):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        u0, v0 = int(corr.intrinsics.u0), int(corr.intrinsics.v0)
        # the principal point has no radial direction but keeps its tangential ratios
        assert not ratios.valid_z[v0, u0]
        assert ratios.valid_x[v0, u0] or not gt_flows.coplanar.valid[v0, u0]

    def test_recover_translation(self, corr, gt_flows, tau):
        estimate = recover_translation(ratio_maps(gt_flows, corr.intrinsics), corr.depth_t)
        assert estimate.available.all()
        np.testing.assert_allclose(estimate.translation, tau, rtol=1e-6)

    def test_cycles_vanish_at_the_true_translation(self, corr, gt_flows, tau):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        assert loss_tan(ratios, corr.depth_t, tau[:2]) < 1e-8
        assert loss_rad(ratios, corr.depth_t, tau[2]) < 1e-8
        assert loss_tan(ratios, corr.depth_t, 1.1 * tau[:2]) > 1e-3

    def test_doubled_depth_tangential_cycle(self, corr, gt_flows, tau):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        # pixel terms 0.5 and aggregate terms 1.0 on both axes
        assert loss_tan(ratios, corr.depth_t.scaled(2.0), tau[:2]) == pytest.approx(3.0, rel=1e-5)

    def test_doubled_radial_translation_cycle(self, corr, gt_flows, tau):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        assert loss_rad(ratios, corr.depth_t, 2.0 * tau[2]) == pytest.approx(1.5, rel=1e-5)

    def test_small_translation_is_skipped(self, corr, gt_flows):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        terms = cycle_terms(ratios, corr.depth_t, (0.0, 0.2, 0.0))
        assert terms.skipped == ["x", "z"]
        assert set(terms.terms) == {"y"}

    def test_empty_mask(self, corr, gt_flows):
        ratios = ratio_maps(gt_flows, corr.intrinsics)
        empty = type(ratios)(
            ratios.rho_x, ratios.rho_y, ratios.rho_z,
            np.zeros_like(ratios.valid_x), ratios.valid_y, ratios.valid_z,
        )
        with pytest.raises(UndefinedLossError):
            cycle_terms(empty, corr.depth_t, (0.2, 0.2, 0.2))
        assert cycle_terms(empty, corr.depth_t, (0.2, 0.2, 0.2), skip_empty=True).skipped == ["x"]


class TestEvaluateLosses:
    def test_true_motion(self, corr, motion):
        report = evaluate_losses(corr, motion)
        assert report.pla < 1e-10
        assert report.axi < 1e-5
        assert report.tan < 1e-6
        assert report.rad < 1e-6
        assert report.loc == 0.0
        assert "pho" in report.skipped_components
        assert report.valid_pixel_count == int(corr.valid.sum())

    @pytest.mark.parametrize("rotation_deg, translation_fraction", [(1.0, 0.0), (0.0, 0.1), (1.0, 0.1)])
    def test_perturbed_motion_scores_worse(self, corr, motion, rotation_deg, translation_fraction):
        truth = evaluate_losses(corr, motion)
        for seed in range(3):
            candidate = perturb_pose(motion, rotation_deg, translation_fraction, seed=seed)
            report = evaluate_losses(corr, candidate)
            assert report.pla + report.axi > truth.pla + truth.axi

    def test_photometric_term(self, corr, motion, rng):
        source = rng.uniform(size=corr.shape + (3,))
        target, _ = inverse_warp(source, corr.flow_ts)
        report = evaluate_losses(corr, motion, target_image=target, source_image=source)
        assert "pho" not in report.skipped_components
        assert report.pho == pytest.approx(0.0, abs=1e-12)

    def test_pure_rotation_skips_alignment_losses(self, corr, motion):
        report = evaluate_losses(corr, SE3Pose(motion.rotation, np.zeros(3)))
        assert {"pla", "axi"} <= set(report.skipped_components)


class TestWeights:
    def test_total(self):
        components = {"pho": 0.5, "pla": 1.0, "axi": 2.0, "tan": 3.0, "rad": 4.0}
        report = total_loss(components, LossWeights.stage(3))
        assert report.total == pytest.approx(0.05 * 3.0 + 0.1 * 7.0 + 0.5)

    def test_stage_presets(self):
        assert LossWeights.stage(1).model_dump() == {"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.01, "alpha": 0.85}
        assert LossWeights.stage(2).lambda1 == 0.05
        assert LossWeights.stage(3) == LossWeights()
        with pytest.raises(SpecError):
            LossWeights.stage(4)

    def test_report_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            LossReport(pla=float("nan"))
