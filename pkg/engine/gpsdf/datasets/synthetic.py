"""Analytic RGB-D scene generator used as the ground-truth oracle.

Depth comes from exact ray-primitive intersection, color from a solid albedo
texture under Lambertian shading with one directional light. Camera rays have
unit z in the camera frame, so the ray parameter of a hit is its depth.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from gpsdf.core.camera import MAX_DEPTH, MIN_DEPTH, Frame, Intrinsics
from gpsdf.core.geometry import Pose, look_at, pixel_rays, twist_exp
from gpsdf.core.logging import get_logger, log_performance
from gpsdf.core.parallel import parallel_map
from gpsdf.schemas.scene import (
    PrimitiveSpec,
    PrimitiveType,
    SceneSpec,
    TextureType,
    TrajectoryKind,
    TrajectorySpec,
)

Array = NDArray[np.float64]

logger = get_logger(__name__)

FRAME_RATE = 30.0
NOISE_WAVES = 8
# Minimum ray parameter accepted as a hit
RAY_EPSILON = 1e-9


class Primitive:
    """One analytic surface with its albedo."""

    def __init__(self, spec: PrimitiveSpec, index: int):
        self.spec = spec
        self.type = spec.type
        self.center = np.array(spec.center)
        self.lo = np.array(spec.min)
        self.hi = np.array(spec.max)
        normal = np.array(spec.normal)
        self.normal = normal / np.linalg.norm(normal)
        self.offset = spec.offset / np.linalg.norm(normal)
        self.color = np.array(spec.color)
        self.color2 = np.array(spec.color2)

        # In-plane basis of a plane primitive
        helper = np.array([1.0, 0.0, 0.0]) if abs(self.normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        self.axis_u = np.cross(self.normal, helper)
        self.axis_u /= np.linalg.norm(self.axis_u)
        self.axis_v = np.cross(self.normal, self.axis_u)
        self.foot = self.normal * self.offset

        # Noise waves depend only on the primitive index, so a scene file fixes its texture
        waves = np.random.default_rng(1000 + index)
        directions = waves.normal(size=(NOISE_WAVES, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        magnitudes = waves.uniform(0.3, 1.0, NOISE_WAVES) * spec.noise_frequency
        self.wave_vectors = directions * magnitudes[:, None]
        self.wave_phases = waves.uniform(0.0, 2.0 * np.pi, NOISE_WAVES)
        self.wave_tints = waves.uniform(0.5, 1.0, (NOISE_WAVES, 3))

    def sdf(self, points: Array) -> Array:
        if self.type == PrimitiveType.SPHERE:
            return np.linalg.norm(points - self.center, axis=-1) - self.spec.radius
        if self.type == PrimitiveType.BOX:
            center = 0.5 * (self.lo + self.hi)
            half = 0.5 * (self.hi - self.lo)
            q = np.abs(points - center) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        # Unbounded plane distance; the visible patch is limited by `extent` only when rendering
        return points @ self.normal - self.offset

    def intersect(self, origin: Array, dirs: Array) -> tuple[Array, Array]:
        """Nearest hit parameter (inf on a miss) and the outward normal per ray."""
        t = np.full(len(dirs), np.inf)
        normals = np.zeros_like(dirs)
        if self.type == PrimitiveType.SPHERE:
            oc = origin - self.center
            a = (dirs * dirs).sum(axis=1)
            b = 2.0 * dirs @ oc
            c = oc @ oc - self.spec.radius**2
            disc = b * b - 4 * a * c
            ok = disc >= 0
            root = np.sqrt(np.where(ok, disc, 0.0))
            near = (-b - root) / (2 * a)
            far = (-b + root) / (2 * a)
            hit_t = np.where(near > RAY_EPSILON, near, far)
            ok &= hit_t > RAY_EPSILON
            t[ok] = hit_t[ok]
            normals[ok] = (origin + dirs[ok] * t[ok, None] - self.center) / self.spec.radius
        elif self.type == PrimitiveType.BOX:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t0 = (self.lo - origin) * inv
                t1 = (self.hi - origin) * inv
            t_small = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
            t_large = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
            enter = t_small.max(axis=1)
            leave = t_large.min(axis=1)
            hit_t = np.where(enter > RAY_EPSILON, enter, leave)
            ok = (leave >= enter) & (hit_t > RAY_EPSILON)
            t[ok] = hit_t[ok]
            points = origin + dirs[ok] * t[ok, None]
            center = 0.5 * (self.lo + self.hi)
            half = 0.5 * (self.hi - self.lo)
            local = (points - center) / half
            axis = np.abs(local).argmax(axis=1)
            n = np.zeros_like(points)
            n[np.arange(len(points)), axis] = np.sign(local[np.arange(len(points)), axis])
            normals[ok] = n
        else:
            denom = dirs @ self.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                hit_t = (self.offset - origin @ self.normal) / denom
            ok = (np.abs(denom) > 1e-12) & (hit_t > RAY_EPSILON)
            points = origin + dirs * np.where(ok, hit_t, 0.0)[:, None]
            rel = points - self.foot
            extent = self.spec.extent
            ok &= (np.abs(rel @ self.axis_u) <= extent) & (np.abs(rel @ self.axis_v) <= extent)
            t[ok] = hit_t[ok]
            normals[ok] = self.normal
        return t, normals

    def albedo(self, points: Array) -> Array:
        spec = self.spec
        if spec.texture == TextureType.CHECKER:
            parity = np.floor(points / spec.cell).astype(np.int64).sum(axis=1) % 2
            return np.where(parity[:, None] == 0, self.color, self.color2)
        if spec.texture == TextureType.NOISE:
            waves = np.sin(points @ self.wave_vectors.T + self.wave_phases)
            variation = spec.noise_amplitude * (waves @ self.wave_tints) / NOISE_WAVES
            return np.clip(self.color + variation, 0.0, 1.0)
        return np.broadcast_to(self.color, points.shape).copy()

    def area(self) -> float:
        if self.type == PrimitiveType.SPHERE:
            return 4.0 * np.pi * self.spec.radius**2
        if self.type == PrimitiveType.BOX:
            x, y, z = self.hi - self.lo
            return 2.0 * (x * y + y * z + z * x)
        return (2.0 * self.spec.extent) ** 2

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        """Uniform surface samples."""
        if self.type == PrimitiveType.SPHERE:
            d = rng.normal(size=(n, 3))
            return self.center + self.spec.radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        if self.type == PrimitiveType.BOX:
            size = self.hi - self.lo
            face_areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
            faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
            points = self.lo + rng.random((n, 3)) * size
            axis = faces % 3
            rows = np.arange(n)
            points[rows, axis] = np.where(faces < 3, self.lo[axis], self.hi[axis])
            return points
        uv = rng.uniform(-self.spec.extent, self.spec.extent, (n, 2))
        return self.foot + uv[:, :1] * self.axis_u + uv[:, 1:] * self.axis_v


class SyntheticScene:
    """Union of analytic primitives with an exact SDF and renderer."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.primitives = [Primitive(p, i) for i, p in enumerate(spec.primitives)]
        light = np.array(spec.light.direction)
        self.light = light / np.linalg.norm(light)
        self.intrinsics = spec.camera.intrinsics()

    def sdf(self, points: Array) -> Array:
        """Signed distance of the union (min over primitives)."""
        points = np.asarray(points, dtype=np.float64)
        return np.min([p.sdf(points) for p in self.primitives], axis=0)

    def sample_surface(self, n: int, rng: np.random.Generator) -> Array:
        """Area-weighted samples over all primitives (reference for geometry metrics)."""
        areas = np.array([p.area() for p in self.primitives])
        owners = rng.choice(len(areas), size=n, p=areas / areas.sum())
        points = np.empty((n, 3))
        for i, primitive in enumerate(self.primitives):
            chosen = owners == i
            points[chosen] = primitive.sample(int(chosen.sum()), rng)
        return points

    def render(self, pose: Pose, intr: Intrinsics | None = None) -> tuple[Array, Array]:
        """Noise-free (rgb, depth) seen from `pose`; depth 0 where nothing is hit in range."""
        intr = intr or self.intrinsics
        dirs = pixel_rays(intr).reshape(-1, 3) @ pose.rotation.T
        origin = pose.translation

        depth = np.full(len(dirs), np.inf)
        owner = np.full(len(dirs), -1)
        normals = np.zeros_like(dirs)
        for i, primitive in enumerate(self.primitives):
            t, n = primitive.intersect(origin, dirs)
            closer = t < depth
            depth[closer] = t[closer]
            owner[closer] = i
            normals[closer] = n[closer]

        in_range = np.isfinite(depth) & (depth >= MIN_DEPTH) & (depth <= MAX_DEPTH)
        rgb = np.zeros((len(dirs), 3))
        points = origin + dirs * np.where(in_range, depth, 0.0)[:, None]
        facing = np.where(((normals * dirs).sum(axis=1) > 0)[:, None], -normals, normals)
        shading = self.spec.light.ambient + (1.0 - self.spec.light.ambient) * np.maximum(
            facing @ self.light, 0.0
        )
        for i, primitive in enumerate(self.primitives):
            mine = in_range & (owner == i)
            rgb[mine] = primitive.albedo(points[mine]) * shading[mine, None]

        h, w = intr.shape
        return (
            np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
            np.where(in_range, depth, 0.0).reshape(h, w),
        )


def _clip_norm(v: Array, limit: float) -> Array:
    norm = float(np.linalg.norm(v))
    return v if norm <= limit else v * (limit / norm)


def _random_step(rng: np.random.Generator, limit: float) -> Array:
    direction = rng.normal(size=3)
    return direction / np.linalg.norm(direction) * limit * rng.random()


def trajectory_poses(spec: TrajectorySpec, count: int, rng: np.random.Generator) -> list[Pose]:
    """Look-at orbit poses; `jitter` adds a bounded random-walk offset to each one.

    The offset rotation and translation each stay within `jitter_deg` / `jitter_m`
    of the orbit, and change by at most that much between consecutive frames.
    """
    target = np.array(spec.target)
    max_angle = np.radians(spec.jitter_deg)
    spin = np.zeros(3)
    shift = np.zeros(3)
    poses = []
    for i in range(count):
        angle = np.radians(spec.start_deg + i * spec.step_deg)
        eye = target + np.array(
            [spec.radius * np.cos(angle), spec.radius * np.sin(angle), spec.height]
        )
        pose = look_at(eye, target)
        if spec.kind == TrajectoryKind.JITTER:
            # clipping onto the ball never lengthens the step
            spin = _clip_norm(spin + _random_step(rng, max_angle), max_angle)
            shift = _clip_norm(shift + _random_step(rng, spec.jitter_m), spec.jitter_m)
            rotation = twist_exp(np.concatenate([spin, np.zeros(3)])).rotation
            pose = pose.compose(Pose(rotation, shift.copy()))
        poses.append(pose)
    return poses


@dataclass(frozen=True)
class SyntheticSequence:
    """Generated frames with their exact poses and noise-free references."""

    scene: SyntheticScene
    frames: list[Frame]
    poses: list[Pose]
    reference_rgb: list[Array]
    reference_depth: list[Array]


def apply_noise(
    depth: Array, sigma: float, dropout: float, rng: np.random.Generator
) -> Array:
    """Additive Gaussian depth noise and random holes on valid pixels."""
    valid = depth > 0
    noisy = depth.copy()
    if sigma > 0:
        noisy[valid] += rng.normal(0.0, sigma, int(valid.sum()))
    if dropout > 0:
        holes = rng.random(depth.shape) < dropout
        noisy[holes] = 0.0
    noisy[(noisy < MIN_DEPTH) | (noisy > MAX_DEPTH)] = 0.0
    return noisy


@log_performance("generate_synthetic")
def generate_synthetic(spec: SceneSpec, frames: int, seed: int = 0) -> SyntheticSequence:
    """Render `frames` views of the scene along its trajectory.

    The trajectory jitter and the noise are drawn from one generator seeded
    with `seed`; equal inputs give bitwise-equal frames.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    scene = SyntheticScene(spec)
    intr = scene.intrinsics
    poses = trajectory_poses(spec.trajectory, frames, rng)

    clean = parallel_map(scene.render, poses)
    result = []
    for index, (rgb, depth) in enumerate(clean):
        noisy = apply_noise(depth, spec.noise.depth_sigma, spec.noise.dropout, rng)
        result.append(Frame(rgb, noisy, intr, index, index / FRAME_RATE))

    logger.info(
        "Generated %d synthetic frames", frames, extra={"operation": "generate_synthetic"}
    )
    return SyntheticSequence(
        scene=scene,
        frames=result,
        poses=poses,
        reference_rgb=[rgb for rgb, _ in clean],
        reference_depth=[depth for _, depth in clean],
    )
