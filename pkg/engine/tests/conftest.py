"""Shared pytest fixtures for all tests."""

import numpy as np
import pytest

from gpsdf.core.camera import Frame, Intrinsics
from gpsdf.core.geometry import Pose, look_at
from gpsdf.datasets.synthetic import SyntheticScene
from gpsdf.schemas.config import RenderConfig, TsdfConfig
from gpsdf.schemas.scene import parse_scene
from gpsdf.services.gaussians import GaussianSet
from gpsdf.services.tsdf_volume import TsdfVolume

SPHERE_SCENE = """
# one textured sphere in front of the camera
camera.width = 64
camera.height = 48
camera.fx = 60
camera.fy = 60
primitive.0.type = sphere
primitive.0.center = 0, 0, 0
primitive.0.radius = 0.5
primitive.0.texture = checker
primitive.0.cell = 0.15
trajectory.radius = 1.6
trajectory.height = 0.4
trajectory.step_deg = 0.5
"""

ROOM_SCENE = """
# box on a floor with a back wall: enough structure to constrain all six DOF
camera.width = 64
camera.height = 48
camera.fx = 55
camera.fy = 55
primitive.0.type = plane
primitive.0.normal = 0, 0, 1
primitive.0.offset = -0.4
primitive.0.extent = 3
primitive.0.texture = checker
primitive.0.cell = 0.2
primitive.1.type = box
primitive.1.min = -0.3, -0.3, -0.4
primitive.1.max = 0.3, 0.3, 0.2
primitive.1.texture = noise
primitive.2.type = sphere
primitive.2.center = 0.1, 0.45, 0.0
primitive.2.radius = 0.2
primitive.2.color = 0.8, 0.3, 0.2
primitive.3.type = plane
primitive.3.normal = 1, 0, 0
primitive.3.offset = -1.2
primitive.3.extent = 3
trajectory.radius = 1.8
trajectory.height = 0.6
trajectory.step_deg = 0.4
"""


@pytest.fixture
def intrinsics() -> Intrinsics:
    """Small 32x24 pinhole camera (divisible for a 3-level pyramid)."""
    return Intrinsics(fx=30.0, fy=30.0, cx=15.5, cy=11.5, width=32, height=24)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def sphere_spec():
    return parse_scene(SPHERE_SCENE, "sphere.scene")


@pytest.fixture
def room_spec():
    return parse_scene(ROOM_SCENE, "room.scene")


@pytest.fixture
def sphere_scene(sphere_spec) -> SyntheticScene:
    return SyntheticScene(sphere_spec)


@pytest.fixture
def front_pose() -> Pose:
    """Camera 1.5 m from the origin looking at it along +y."""
    return look_at(np.array([0.0, -1.5, 0.0]), np.zeros(3))


@pytest.fixture
def sphere_frame(sphere_scene: SyntheticScene, front_pose: Pose) -> Frame:
    rgb, depth = sphere_scene.render(front_pose)
    return Frame(rgb, depth, sphere_scene.intrinsics, index=0, timestamp=0.0)


@pytest.fixture
def tsdf_config() -> TsdfConfig:
    return TsdfConfig(voxel_size=0.02)


@pytest.fixture
def fused_volume(tsdf_config: TsdfConfig, sphere_frame: Frame, front_pose: Pose) -> TsdfVolume:
    """Volume holding a single fused view of the sphere."""
    volume = TsdfVolume(tsdf_config)
    volume.allocate(sphere_frame, front_pose)
    volume.integrate(sphere_frame, front_pose)
    return volume


@pytest.fixture
def render_config() -> RenderConfig:
    return RenderConfig()


def random_gaussians(
    rng: np.random.Generator, count: int, center: np.ndarray, spread: float, sh_degree: int = 1
) -> GaussianSet:
    """Randomly placed, sized and oriented Gaussians around `center`."""
    rotations = rng.normal(size=(count, 4))
    return GaussianSet.create(
        positions=center + rng.uniform(-spread, spread, (count, 3)),
        scales=rng.uniform(0.01, 0.05, (count, 3)),
        rotations=rotations / np.linalg.norm(rotations, axis=1, keepdims=True),
        opacities=rng.uniform(0.2, 0.9, count),
        colors=rng.uniform(0.1, 0.9, (count, 3)),
        sh_degree=sh_degree,
    )
