"""Tests for sort-free splatting, composition and the analytic backward pass."""

from dataclasses import fields

import numpy as np
import pytest

from gpsdf.core.camera import Intrinsics
from gpsdf.core.geometry import Pose
from gpsdf.schemas.config import RenderConfig
from gpsdf.services.gaussians import GaussianSet
from gpsdf.services.splat_renderer import (
    accumulate,
    backward,
    compose,
    loss_and_gradients,
    loss_l1,
    project,
    render_view,
)
from gpsdf.services.tsdf_volume import SdfRender
from tests.conftest import random_gaussians


def flat_sdf(intr, depth: float = 2.0, color: float = 0.4, rng=None) -> SdfRender:
    """SDF render of a fronto-parallel wall, optionally with a random texture."""
    h, w = intr.shape
    rgb = np.full((h, w, 3), color) if rng is None else rng.uniform(0.1, 0.9, (h, w, 3))
    return SdfRender(
        color=rgb,
        depth=np.full((h, w), depth),
        vertices=np.zeros((h, w, 3)),
        normals=np.tile([0.0, 0.0, -1.0], (h, w, 1)),
        hit=np.ones((h, w), dtype=bool),
    )


def single_gaussian(position, scale=0.05, opacity=0.8, color=(0.9, 0.2, 0.1)) -> GaussianSet:
    return GaussianSet.create(
        positions=np.array([position]),
        scales=np.full((1, 3), scale),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacities=np.array([opacity]),
        colors=np.array([color]),
    )


@pytest.mark.unit
class TestCompose:
    """Tests for the SDF + Gaussian composition."""

    def test_zero_gaussians_returns_sdf_color_bitwise(self, intrinsics, rng):
        """With no Gaussians the composite should be exactly the SDF image."""
        sdf = flat_sdf(intrinsics, rng=rng)
        product = render_view(sdf, GaussianSet.empty(), Pose.identity(), intrinsics)
        np.testing.assert_array_equal(product.composite, sdf.color)
        assert product.gaussians.weight.max() == 0.0

    def test_sdf_only_switch_ignores_gaussians(self, intrinsics):
        sdf = flat_sdf(intrinsics)
        gaussians = single_gaussian([0.0, 0.0, 1.0])
        product = render_view(sdf, gaussians, Pose.identity(), intrinsics, use_gaussians=False)
        np.testing.assert_array_equal(product.composite, sdf.color)

    def test_weighted_average(self, intrinsics):
        """C* should be (C_t + C_G) / (1 + W_G) per pixel."""
        sdf = flat_sdf(intrinsics, color=0.2)
        render = accumulate(single_gaussian([0.0, 0.0, 1.0]), Pose.identity(), intrinsics, sdf.depth)
        composite = compose(sdf.color, render)
        v, u = 11, 15
        expected = (sdf.color[v, u] + render.color[v, u]) / (1.0 + render.weight[v, u])
        np.testing.assert_allclose(composite[v, u], expected)
        assert render.weight[v, u] > 0

    def test_composite_lies_between_sdf_and_gaussian_color(self, intrinsics, rng):
        """Where W_G > 0, C* is a convex combination of C_t and C_G / W_G."""
        sdf = flat_sdf(intrinsics, depth=1.8, rng=rng)
        gaussians = random_gaussians(rng, 200, np.array([0.0, 0.0, 1.5]), 0.6)
        render = accumulate(gaussians, Pose.identity(), intrinsics, sdf.depth)
        composite = compose(sdf.color, render)

        covered = render.weight > 0
        assert covered.sum() > 100
        mean_color = render.color[covered] / render.weight[covered][:, None]
        low = np.minimum(sdf.color[covered], mean_color)
        high = np.maximum(sdf.color[covered], mean_color)
        assert np.all(composite[covered] >= low - 1e-12)
        assert np.all(composite[covered] <= high + 1e-12)


@pytest.mark.unit
class TestAccumulate:
    """Tests for the forward splatting pass."""

    def test_order_independence(self, intrinsics, rng):
        """Permuting the Gaussian list should not change the image beyond rounding."""
        gaussians = random_gaussians(rng, 1000, np.array([0.0, 0.0, 1.5]), 0.6)
        sdf = flat_sdf(intrinsics, depth=1.8, rng=rng)
        pose = Pose.identity()
        reference = compose(sdf.color, accumulate(gaussians, pose, intrinsics, sdf.depth))
        for _ in range(10):
            shuffled = gaussians.select(rng.permutation(len(gaussians)))
            image = compose(sdf.color, accumulate(shuffled, pose, intrinsics, sdf.depth))
            assert np.abs(image - reference).max() <= 1e-10

    def test_gaussian_behind_wall_is_culled(self, intrinsics):
        """A Gaussian 10 cm behind the surface should add nothing and get no gradient."""
        sdf = flat_sdf(intrinsics, depth=1.0)
        gaussians = single_gaussian([0.0, 0.0, 1.1])
        render = accumulate(gaussians, Pose.identity(), intrinsics, sdf.depth)
        assert render.weight.max() == 0.0
        assert render.color.max() == 0.0
        assert render.contributions[0] == 0

        grads = backward(
            gaussians, Pose.identity(), intrinsics, sdf, np.ones((*intrinsics.shape, 3))
        )
        assert grads.max_abs() == 0.0

    def test_gaussian_within_epsilon_is_kept(self, intrinsics):
        """A Gaussian 1 cm behind the surface is inside the 2 cm slack."""
        sdf = flat_sdf(intrinsics, depth=1.0)
        render = accumulate(single_gaussian([0.0, 0.0, 1.01]), Pose.identity(), intrinsics, sdf.depth)
        assert render.contributions[0] > 0

    def test_no_depth_test_where_sdf_missed(self, intrinsics):
        sdf_depth = np.zeros(intrinsics.shape)
        render = accumulate(single_gaussian([0.0, 0.0, 3.0]), Pose.identity(), intrinsics, sdf_depth)
        assert render.weight.max() > 0

    def test_smaller_slack_never_adds_weight(self, intrinsics, rng):
        """Tightening the depth test can only drop contributions, pixel by pixel."""
        gaussians = random_gaussians(rng, 300, np.array([0.0, 0.0, 1.5]), 0.5)
        surface = rng.uniform(1.2, 1.8, intrinsics.shape)
        weights = [
            accumulate(
                gaussians, Pose.identity(), intrinsics, surface, RenderConfig(epsilon=epsilon)
            ).weight
            for epsilon in (0.3, 0.1, 0.02, 0.005, 0.001)
        ]
        for looser, tighter in zip(weights, weights[1:]):
            assert np.all(tighter <= looser + 1e-12)
        assert weights[-1].sum() < weights[0].sum()

    def test_peak_weight_matches_opacity(self, intrinsics):
        """At the projected center the weight should be close to the opacity."""
        gaussians = single_gaussian([0.0, 0.0, 1.0], scale=0.2, opacity=0.6)
        render = accumulate(gaussians, Pose.identity(), intrinsics, np.zeros(intrinsics.shape))
        # Center projects to (15.5, 11.5); nearest pixel is half a pixel away on both axes
        assert render.weight.max() == pytest.approx(0.6, rel=0.05)


@pytest.mark.unit
class TestProject:
    """Tests for the screen-space projection."""

    def test_culls_behind_camera_and_off_image(self, intrinsics):
        gaussians = GaussianSet.create(
            positions=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [50.0, 0.0, 1.0]]),
            scales=np.full((3, 3), 0.02),
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)),
            opacities=np.full(3, 0.5),
            colors=np.full((3, 3), 0.5),
        )
        splats = project(gaussians, Pose.identity(), intrinsics)
        assert splats[0] is not None
        assert splats[1] is None
        assert splats[2] is None
        np.testing.assert_allclose(splats[0].center, [intrinsics.cx, intrinsics.cy])
        assert splats[0].depth == pytest.approx(1.0)
        np.testing.assert_allclose(splats[0].color, 0.5)


@pytest.mark.unit
class TestLoss:
    """Tests for the masked L1 loss."""

    def test_masked_mean(self):
        composite = np.zeros((2, 2, 3))
        target = np.ones((2, 2, 3))
        mask = np.array([[True, False], [False, False]])
        loss, grad = loss_l1(composite, target, mask)
        assert loss == pytest.approx(1.0)
        np.testing.assert_allclose(grad[0, 0], -1.0 / 3.0)
        assert np.all(grad[1] == 0)

    def test_empty_mask(self):
        loss, grad = loss_l1(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2), dtype=bool))
        assert loss == 0.0
        assert not grad.any()

    def test_sdf_misses_stay_out_of_the_loss(self, intrinsics):
        """Gaussian coverage over raycast misses does not bring them into the loss."""
        miss = np.zeros(intrinsics.shape, dtype=bool)
        miss[:, :16] = True
        wall = flat_sdf(intrinsics, depth=2.0, color=0.3)
        sdf = SdfRender(
            color=np.where(miss[..., None], 0.0, wall.color),
            depth=np.where(miss, 0.0, wall.depth),
            vertices=wall.vertices,
            normals=wall.normals,
            hit=~miss,
        )
        gaussians = single_gaussian([0.0, 0.0, 1.0], scale=0.2)
        product = render_view(sdf, gaussians, Pose.identity(), intrinsics)
        assert product.gaussians.weight[miss].max() > 0
        np.testing.assert_array_equal(product.loss_mask, ~miss)

        target = np.full((*intrinsics.shape, 3), 0.6)
        changed = np.where(miss[..., None], 0.0, target)
        loss, grads = loss_and_gradients(sdf, target, gaussians, Pose.identity(), intrinsics)
        same_loss, same_grads = loss_and_gradients(sdf, changed, gaussians, Pose.identity(), intrinsics)
        assert loss == same_loss
        np.testing.assert_array_equal(grads.sh, same_grads.sh)

    def test_loss_and_gradients_reduce_loss(self, intrinsics, rng):
        """A small step against the gradient should lower the loss."""
        sdf = flat_sdf(intrinsics, depth=2.0, color=0.3)
        target = np.full((*intrinsics.shape, 3), 0.6)
        gaussians = random_gaussians(rng, 20, np.array([0.0, 0.0, 1.5]), 0.3)
        loss, grads = loss_and_gradients(sdf, target, gaussians, Pose.identity(), intrinsics)
        stepped = gaussians.copy()
        stepped.sh = stepped.sh - 0.5 * grads.sh / max(np.abs(grads.sh).max(), 1e-12) * 1e-2
        new_loss, _ = loss_and_gradients(sdf, target, stepped, Pose.identity(), intrinsics)
        assert new_loss < loss


def _linear_objective(gaussians, pose, intr, sdf, weights, cfg):
    render = accumulate(gaussians, pose, intr, sdf.depth, cfg)
    return float((weights * compose(sdf.color, render)).sum()), render.contributions


def check_gradients(rng: np.random.Generator, count: int, h: float = 1e-4) -> int:
    """Compare backward() with central differences; returns the number of checked entries."""
    cfg = RenderConfig()
    intr = Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24)
    pose = Pose.identity()
    sdf = flat_sdf(intr, depth=2.0, rng=rng)
    gaussians = random_gaussians(rng, count, np.array([0.0, 0.0, 1.4]), 0.15)
    gaussians.log_scales = np.log(rng.uniform(0.04, 0.1, (count, 3)))
    gaussians.sh[:, 1:] = rng.uniform(-0.1, 0.1, gaussians.sh[:, 1:].shape)
    weights = rng.uniform(-1.0, 1.0, (*intr.shape, 3))

    _, base_counts = _linear_objective(gaussians, pose, intr, sdf, weights, cfg)
    analytic = backward(gaussians, pose, intr, sdf, weights, cfg)

    checked = 0
    for f in fields(GaussianSet):
        values = getattr(gaussians, f.name)
        grad = getattr(analytic, f.name)
        for flat_index in range(values.size):
            idx = np.unravel_index(flat_index, values.shape)
            plus, minus = gaussians.copy(), gaussians.copy()
            getattr(plus, f.name)[idx] += h
            getattr(minus, f.name)[idx] -= h
            f_plus, counts_plus = _linear_objective(plus, pose, intr, sdf, weights, cfg)
            f_minus, counts_minus = _linear_objective(minus, pose, intr, sdf, weights, cfg)
            # The footprint or culling set changed inside the stencil: not differentiable here
            if not (np.array_equal(counts_plus, base_counts) and np.array_equal(counts_minus, base_counts)):
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            if abs(grad[idx]) <= 1e-6 and abs(numeric) <= 1e-6:
                continue
            scale = max(abs(grad[idx]), abs(numeric))
            assert abs(grad[idx] - numeric) <= 1e-3 * scale + 1e-7, (
                f"{f.name}{idx}: analytic {grad[idx]:.8g} vs numeric {numeric:.8g}"
            )
            checked += 1
    return checked


@pytest.mark.unit
class TestBackward:
    """Tests for the analytic gradients against finite differences."""

    def test_single_gaussian_matches_finite_differences(self):
        assert check_gradients(np.random.default_rng(7), 1) > 10

    def test_overlapping_gaussians_match_finite_differences(self):
        assert check_gradients(np.random.default_rng(11), 4) > 40

    @pytest.mark.slow
    def test_random_scenes_match_finite_differences(self):
        """100 random scenes of 1-8 overlapping Gaussians."""
        rng = np.random.default_rng(2024)
        for _ in range(100):
            check_gradients(rng, int(rng.integers(1, 9)))
