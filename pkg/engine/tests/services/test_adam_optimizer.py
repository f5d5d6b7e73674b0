"""Tests for the Adam optimizer over Gaussian parameters."""

import numpy as np
import pytest

from gpsdf.core.geometry import Pose
from gpsdf.schemas.config import OptimizerConfig
from gpsdf.services.adam_optimizer import AdamOptimizer, parameter_groups
from gpsdf.services.gaussians import GaussianGradients, GaussianSet
from gpsdf.services.splat_renderer import loss_and_gradients, render_view
from gpsdf.services.tsdf_volume import SdfRender
from tests.conftest import random_gaussians


@pytest.fixture
def gaussians(rng):
    return random_gaussians(rng, 6, np.zeros(3), 1.0)


@pytest.mark.unit
class TestAdamOptimizer:
    """Tests for per-group Adam updates and state bookkeeping."""

    def test_groups_cover_every_parameter(self):
        names = [group.name for group in parameter_groups(OptimizerConfig())]
        assert names == ["position", "sh0", "sh_rest", "opacity", "scale", "rotation"]

    def test_first_step_moves_by_learning_rate(self, gaussians):
        """With bias correction the first update is lr * sign(grad)."""
        config = OptimizerConfig()
        optimizer = AdamOptimizer(config)
        grads = GaussianGradients.zeros_like(gaussians)
        grads.positions[:] = 3.0
        grads.raw_opacity[:] = -0.5
        before = gaussians.copy()

        optimizer.step(gaussians, grads)

        np.testing.assert_allclose(
            gaussians.positions, before.positions - config.lr_position, rtol=1e-9, atol=1e-12
        )
        np.testing.assert_allclose(
            gaussians.raw_opacity, before.raw_opacity + config.lr_opacity, rtol=1e-9, atol=1e-12
        )
        np.testing.assert_array_equal(gaussians.sh, before.sh)

    def test_sh_groups_use_their_own_rates(self, gaussians):
        config = OptimizerConfig(lr_sh0=0.01, lr_sh_rest=0.001)
        optimizer = AdamOptimizer(config)
        grads = GaussianGradients.zeros_like(gaussians)
        grads.sh[:] = 1.0
        before = gaussians.sh.copy()
        optimizer.step(gaussians, grads)
        np.testing.assert_allclose(gaussians.sh[:, 0], before[:, 0] - 0.01)
        np.testing.assert_allclose(gaussians.sh[:, 1:], before[:, 1:] - 0.001)

    def test_quaternions_are_renormalized(self, gaussians):
        optimizer = AdamOptimizer()
        grads = GaussianGradients.zeros_like(gaussians)
        grads.rotations[:, 0] = 1.0
        optimizer.step(gaussians, grads)
        np.testing.assert_allclose(np.linalg.norm(gaussians.rotations, axis=1), 1.0)

    def test_extend_and_prune_track_the_list(self, gaussians, rng):
        optimizer = AdamOptimizer()
        grads = GaussianGradients.zeros_like(gaussians)
        grads.positions[:] = 1.0
        optimizer.step(gaussians, grads)

        grown = gaussians.concat(random_gaussians(rng, 2, np.zeros(3), 1.0))
        optimizer.extend(grown, 2)
        assert optimizer.state.first["position"].shape == (8, 3)
        assert not optimizer.state.first["position"][6:].any()
        assert optimizer.state.first["position"][:6].all()

        keep = np.array([True, False] * 4)
        optimizer.prune(keep)
        assert optimizer.state.second["sh_rest"].shape == (4, 3, 3)
        optimizer.step(grown.select(keep), GaussianGradients.zeros_like(grown.select(keep)))
        assert optimizer.state.step == 2

    def test_count_mismatch_is_an_error(self, gaussians, rng):
        optimizer = AdamOptimizer()
        optimizer.step(gaussians, GaussianGradients.zeros_like(gaussians))
        other = random_gaussians(rng, 2, np.zeros(3), 1.0)
        with pytest.raises(ValueError, match="tracks 6"):
            optimizer.step(other, GaussianGradients.zeros_like(other))

    def test_extend_before_first_step_is_lazy(self, gaussians):
        """Moments are created on the first step, so early extends are no-ops."""
        optimizer = AdamOptimizer()
        optimizer.extend(gaussians, 6)
        optimizer.step(gaussians, GaussianGradients.zeros_like(gaussians))
        assert optimizer.state.first["scale"].shape == (6, 3)

    def test_constant_gradient_steps_by_learning_rate(self, gaussians):
        """Under a steady gradient each update settles at lr in magnitude."""
        config = OptimizerConfig(lr_position=0.002)
        optimizer = AdamOptimizer(config)
        grads = GaussianGradients.zeros_like(gaussians)
        grads.positions[:] = 2.0
        grads.positions[:, 1] = -0.5

        for _ in range(100):
            before = gaussians.positions.copy()
            optimizer.step(gaussians, grads)

        step = gaussians.positions - before
        np.testing.assert_allclose(np.abs(step), config.lr_position, rtol=1e-6)
        assert np.all(np.sign(step) == -np.sign(grads.positions))


@pytest.mark.unit
class TestColorFit:
    """Adam driving one Gaussian's color towards a fixed view."""

    def test_l1_loss_falls_every_step(self, intrinsics):
        h, w = intrinsics.shape
        wall = SdfRender(
            color=np.full((h, w, 3), 0.4),
            depth=np.full((h, w), 2.0),
            vertices=np.zeros((h, w, 3)),
            normals=np.tile([0.0, 0.0, -1.0], (h, w, 1)),
            hit=np.ones((h, w), dtype=bool),
        )

        def gaussian(color):
            return GaussianSet.create(
                positions=np.array([[0.0, 0.0, 1.0]]),
                scales=np.full((1, 3), 0.2),
                rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
                opacities=np.array([0.8]),
                colors=np.array([color]),
            )

        target = render_view(wall, gaussian((0.2, 0.7, 0.5)), Pose.identity(), intrinsics).composite
        fitted = gaussian((0.9, 0.2, 0.1))
        # only the base color moves
        optimizer = AdamOptimizer(
            OptimizerConfig(
                lr_position=0.0, lr_sh0=0.01, lr_opacity=0.0, lr_scale=0.0, lr_rotation=0.0,
                lr_sh_rest=0.0,
            )
        )

        losses = []
        for _ in range(50):
            loss, grads = loss_and_gradients(wall, target, fitted, Pose.identity(), intrinsics)
            losses.append(loss)
            optimizer.step(fitted, grads)

        assert np.all(np.diff(losses) < 0)
        assert losses[-1] < 0.8 * losses[0]
