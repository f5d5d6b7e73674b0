"""Tests for image, trajectory and geometry metrics."""

import math

import numpy as np
import pytest

from gpsdf.core.exceptions import MetricError
from gpsdf.core.geometry import Pose, twist_exp
from gpsdf.services.metrics_service import (
    PSNR_CAP,
    align_rigid,
    ate_rmse,
    frustum_filter,
    geometry_ratios,
    image_scores,
    mesh_sampler,
    psnr,
    sample_mesh_surface,
    ssim,
)
from gpsdf.services.tsdf_volume import TriangleMesh


def unit_square(z: float = 0.0) -> TriangleMesh:
    vertices = np.array([[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]])
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]), np.zeros((4, 3)))


@pytest.fixture
def trajectory(rng) -> list[Pose]:
    return [twist_exp(rng.normal(scale=0.3, size=6)) for _ in range(100)]


@pytest.mark.unit
class TestPsnr:
    """Tests for PSNR."""

    def test_identical_images_hit_the_cap(self, rng):
        image = rng.random((8, 8, 3))
        assert psnr(image, image) == PSNR_CAP

    def test_known_error(self):
        assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)

    def test_matches_direct_computation(self, rng):
        a, b = rng.random((16, 12, 3)), rng.random((16, 12, 3))
        expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert abs(psnr(a, b) - expected) < 1e-6

    def test_mask_restricts_pixels(self):
        a = np.zeros((2, 2, 3))
        b = np.zeros((2, 2, 3))
        b[1, 1] = 1.0
        mask = np.array([[True, True], [True, False]])
        assert psnr(a, b, mask) == PSNR_CAP

    def test_empty_mask(self):
        with pytest.raises(MetricError, match="empty mask"):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(MetricError, match="shapes differ"):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


@pytest.mark.unit
class TestSsim:
    """Tests for SSIM."""

    def test_identical_images(self, rng):
        image = rng.random((24, 32, 3))
        assert ssim(image, image) == pytest.approx(1.0)

    def test_noise_lowers_the_score(self, rng):
        image = rng.random((24, 32, 3))
        noisy = np.clip(image + rng.normal(scale=0.2, size=image.shape), 0, 1)
        assert ssim(image, noisy) < 0.9

    def test_small_images_are_rejected(self):
        with pytest.raises(MetricError, match="at least 11"):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_image_scores_average_frames(self, rng):
        a = rng.random((16, 16, 3))
        pairs = [(a, a, None), (np.zeros((16, 16, 3)), np.full((16, 16, 3), 0.1), None)]
        mean_psnr, _ = image_scores(pairs)
        assert mean_psnr == pytest.approx((PSNR_CAP + 20.0) / 2)

    def test_image_scores_need_frames(self):
        with pytest.raises(MetricError, match="no images"):
            image_scores([])


@pytest.mark.unit
class TestAte:
    """Tests for absolute trajectory error."""

    def test_identical_trajectories(self, trajectory):
        assert ate_rmse(trajectory, trajectory) == pytest.approx(0.0, abs=1e-12)

    def test_invariant_to_global_rigid_motion(self, trajectory, rng):
        """Moving either trajectory rigidly should not change the error."""
        noisy = [Pose(p.rotation, p.translation + rng.normal(scale=0.01, size=3)) for p in trajectory]
        offset = twist_exp(np.array([0.4, -1.0, 0.3, 2.0, -5.0, 1.0]))
        moved = [offset.compose(p) for p in noisy]
        assert abs(ate_rmse(moved, trajectory) - ate_rmse(noisy, trajectory)) <= 1e-9
        assert abs(ate_rmse(trajectory, moved) - ate_rmse(trajectory, noisy)) <= 1e-9

    def test_single_offset_is_bounded_by_unaligned_error(self, trajectory):
        """One 1 cm outlier among 100 poses: alignment can only reduce the 1 mm raw RMSE."""
        shifted = list(trajectory)
        shifted[42] = Pose(shifted[42].rotation, shifted[42].translation + [0.01, 0.0, 0.0])
        error = ate_rmse(shifted, trajectory)
        assert 0.0 < error <= 0.001 + 1e-12

    def test_align_rigid_recovers_transform(self, rng):
        points = rng.normal(size=(30, 3))
        offset = twist_exp(np.array([0.3, 0.2, -0.1, 1.0, 2.0, 3.0]))
        rotation, translation = align_rigid(points, offset.apply(points))
        np.testing.assert_allclose(rotation, offset.rotation, atol=1e-10)
        np.testing.assert_allclose(translation, offset.translation, atol=1e-10)

    def test_length_mismatch(self, trajectory):
        with pytest.raises(MetricError, match="lengths differ"):
            ate_rmse(trajectory[:3], trajectory[:4])

    def test_needs_two_poses(self, trajectory):
        with pytest.raises(MetricError, match="at least two"):
            ate_rmse(trajectory[:1], trajectory[:1])


@pytest.mark.unit
class TestGeometry:
    """Tests for surface sampling, frustum filtering and accuracy/completion."""

    def test_mesh_samples_stay_on_the_surface(self, rng):
        samples = sample_mesh_surface(unit_square(0.5), 500, rng)
        assert samples.shape == (500, 3)
        np.testing.assert_allclose(samples[:, 2], 0.5)
        assert np.all((samples[:, :2] >= 0) & (samples[:, :2] <= 1))

    def test_mesh_against_itself(self):
        mesh = unit_square()
        scores = geometry_ratios(mesh, mesh_sampler(mesh), samples=2000)
        assert scores.accuracy_ratio == 1.0
        assert scores.completion_ratio == 1.0
        assert scores.accuracy < 0.03

    def test_offset_surface_fails_the_threshold(self):
        scores = geometry_ratios(unit_square(0.1), mesh_sampler(unit_square()), samples=500)
        assert scores.accuracy == pytest.approx(0.1)
        assert scores.accuracy_ratio == 0.0

    def test_empty_mesh(self):
        with pytest.raises(MetricError, match="non-empty"):
            geometry_ratios(TriangleMesh.empty(), mesh_sampler(unit_square()))

    def test_frustum_filter(self, intrinsics):
        points = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [5.0, 0.0, 1.0], [0.0, 0.0, 3.0]])
        poses = [Pose.identity()]
        np.testing.assert_array_equal(
            frustum_filter(points, poses, intrinsics), [True, False, False, True]
        )
        # A wall at 2 m hides the point at 3 m
        depth = np.full(intrinsics.shape, 2.0)
        np.testing.assert_array_equal(
            frustum_filter(points, poses, intrinsics, [depth]), [True, False, False, False]
        )
