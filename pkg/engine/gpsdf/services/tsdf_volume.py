"""Voxel-block-hashed TSDF volume.

Voxel `v` (integer coordinates) sits at world position `v * voxel_size`; voxels
are stored in 8x8x8 blocks addressed through an open-addressing spatial hash on
the block coordinate `floor(v / 8)`. Distances are normalized by the truncation
`mu`, so every stored tsdf lies in [-1, 1].
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from skimage import measure

from gpsdf.core.camera import Frame, Intrinsics
from gpsdf.core.exceptions import BlockBudgetExceededError, DatasetError, ExportError
from gpsdf.core.geometry import GeometryMaps, Pose, pixel_rays
from gpsdf.core.logging import LoggerMixin, log_performance
from gpsdf.core.parallel import chunk_ranges, parallel_map
from gpsdf.schemas.config import TsdfConfig

Array = NDArray[np.float64]
IntArray = NDArray[np.int64]

BLOCK_EDGE = 8
BLOCK_VOXELS = BLOCK_EDGE**3
HASH_PRIMES = (73856093, 19349669, 83492791)

# Blocks per edge of a marching-cubes chunk
MESH_CHUNK_BLOCKS = 4
# Work-group sizes for the parallel kernels
FUSION_GROUP_BLOCKS = 256
RAY_GROUP = 4096
PIXEL_GROUP = 32768

# Packing offset for signed block coordinates into one int64 key (21 bits per axis)
_PACK_OFFSET = 1 << 20
_PACK_MASK = (1 << 21) - 1

# Voxel offsets inside a block; linear index = x * 64 + y * 8 + z
_LOCAL = (
    np.stack(np.meshgrid(*(np.arange(BLOCK_EDGE),) * 3, indexing="ij"), axis=-1)
    .reshape(-1, 3)
    .astype(np.int64)
)
# Cell corners for trilinear interpolation
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def _pack(coords: IntArray) -> IntArray:
    c = coords.astype(np.int64) + _PACK_OFFSET
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _unpack(keys: IntArray) -> IntArray:
    return (
        np.stack([(keys >> 42) & _PACK_MASK, (keys >> 21) & _PACK_MASK, keys & _PACK_MASK], axis=1)
        - _PACK_OFFSET
    )


def _unique_rows(coords: IntArray) -> IntArray:
    """Sorted unique int coordinates (lexicographic x, y, z)."""
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return _unpack(np.unique(_pack(coords)))


class SpatialHash:
    """Open-addressing map from integer block coordinates to dense block ids.

    Linear probing on the classic XOR-multiply hash; the table doubles once it is
    half full. Batched inserts resolve slot races by coordinate order, so the
    table layout is a deterministic function of the insertion sequence.
    """

    def __init__(self, capacity: int = 1 << 12):
        capacity = max(16, 1 << (int(capacity) - 1).bit_length())
        self._keys = np.zeros((capacity, 3), dtype=np.int32)
        self._values = np.full(capacity, -1, dtype=np.int64)
        self.size = 0

    @property
    def capacity(self) -> int:
        return len(self._values)

    def _slots(self, coords: IntArray) -> IntArray:
        c = coords.astype(np.int64)
        h = (c[:, 0] * HASH_PRIMES[0]) ^ (c[:, 1] * HASH_PRIMES[1]) ^ (c[:, 2] * HASH_PRIMES[2])
        return h & (self.capacity - 1)

    def lookup(self, coords: IntArray) -> IntArray:
        """Block ids for (N, 3) coordinates; -1 where nothing is allocated."""
        result = np.full(len(coords), -1, dtype=np.int64)
        if len(coords) == 0 or self.size == 0:
            return result
        mask = self.capacity - 1
        slots = self._slots(coords)
        pending = np.arange(len(coords))
        for _ in range(self.capacity):
            s = slots[pending]
            values = self._values[s]
            occupied = values >= 0
            match = occupied & np.all(self._keys[s] == coords[pending], axis=1)
            result[pending[match]] = values[match]
            pending = pending[occupied & ~match]
            if pending.size == 0:
                break
            slots[pending] = (slots[pending] + 1) & mask
        return result

    def insert(self, coords: IntArray) -> IntArray:
        """Insert unique, absent coordinates; returns their new sequential ids."""
        ids = np.arange(self.size, self.size + len(coords), dtype=np.int64)
        if len(coords) == 0:
            return ids
        if 2 * (self.size + len(coords)) > self.capacity:
            self._grow(self.size + len(coords))
        self._place(coords.astype(np.int32), ids)
        self.size += len(coords)
        return ids

    def copy(self) -> "SpatialHash":
        clone = SpatialHash.__new__(SpatialHash)
        clone._keys = self._keys.copy()
        clone._values = self._values.copy()
        clone.size = self.size
        return clone

    def _place(self, coords: NDArray[np.int32], ids: IntArray) -> None:
        mask = self.capacity - 1
        slots = self._slots(coords)
        pending = np.arange(len(coords))
        while pending.size:
            s = slots[pending]
            free = self._values[s] < 0
            candidates = pending[free]
            if candidates.size:
                won_slots, first = np.unique(s[free], return_index=True)
                winners = candidates[first]
                self._values[won_slots] = ids[winners]
                self._keys[won_slots] = coords[winners]
                placed = np.zeros(len(coords), dtype=bool)
                placed[winners] = True
                pending = pending[~placed[pending]]
            slots[pending] = (slots[pending] + 1) & mask

    def _grow(self, required: int) -> None:
        occupied = self._values >= 0
        old_keys, old_values = self._keys[occupied], self._values[occupied]
        capacity = 1 << (4 * required - 1).bit_length()
        self._keys = np.zeros((capacity, 3), dtype=np.int32)
        self._values = np.full(capacity, -1, dtype=np.int64)
        self._place(old_keys, old_values)


@dataclass(frozen=True)
class SdfRender:
    """Raycast products; `vertices`/`normals` are NaN and `depth` 0 at misses."""

    color: Array  # (H, W, 3), black at misses
    depth: Array  # (H, W), camera z of the surface
    vertices: Array  # (H, W, 3) world
    normals: Array  # (H, W, 3) unit, world
    hit: NDArray[np.bool_]  # (H, W)

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "SdfRender":
        h, w = shape
        return cls(
            color=np.zeros((h, w, 3)),
            depth=np.zeros((h, w)),
            vertices=np.full((h, w, 3), np.nan),
            normals=np.full((h, w, 3), np.nan),
            hit=np.zeros((h, w), dtype=bool),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.hit.shape

    def as_maps(self) -> GeometryMaps:
        """World-frame geometry maps with zeros at misses."""
        vertices = np.where(self.hit[..., None], self.vertices, 0.0)
        normals = np.where(self.hit[..., None], self.normals, 0.0)
        return GeometryMaps(vertices, normals, self.hit.copy())


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with per-vertex colors in [0, 1]."""

    vertices: Array  # (V, 3)
    faces: IntArray  # (F, 3)
    colors: Array  # (V, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def _face_cross(self) -> Array:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def face_areas(self) -> Array:
        return 0.5 * np.linalg.norm(self._face_cross(), axis=1)

    def face_normals(self) -> Array:
        cross = self._face_cross()
        length = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, length, out=np.zeros_like(cross), where=length > 0)


class TsdfVolume(LoggerMixin):
    """Sparse TSDF volume with fused color and capped fusion weights."""

    def __init__(self, config: TsdfConfig | None = None):
        self.config = config or TsdfConfig()
        self.voxel_size = self.config.voxel_size
        self.mu = self.config.mu
        self.w_max = self.config.w_max
        self.block_size = self.voxel_size * BLOCK_EDGE

        self._hash = SpatialHash()
        self._coords = np.zeros((0, 3), dtype=np.int32)
        self._tsdf = np.ones((0, BLOCK_VOXELS), dtype=np.float32)
        self._weight = np.zeros((0, BLOCK_VOXELS), dtype=np.float32)
        self._color = np.zeros((0, BLOCK_VOXELS, 3), dtype=np.float32)
        self.block_count = 0

    def __len__(self) -> int:
        return self.block_count

    @property
    def is_empty(self) -> bool:
        return self.block_count == 0

    def block_coords(self) -> IntArray:
        """Coordinates of allocated blocks in allocation order."""
        return self._coords[: self.block_count].astype(np.int64)

    def _reserve(self, count: int) -> None:
        capacity = len(self._coords)
        if count <= capacity:
            return
        capacity = max(count, 2 * capacity, 1024)
        extra = capacity - len(self._coords)
        self._coords = np.concatenate([self._coords, np.zeros((extra, 3), dtype=np.int32)])
        self._tsdf = np.concatenate([self._tsdf, np.ones((extra, BLOCK_VOXELS), np.float32)])
        self._weight = np.concatenate(
            [self._weight, np.zeros((extra, BLOCK_VOXELS), np.float32)]
        )
        self._color = np.concatenate(
            [self._color, np.zeros((extra, BLOCK_VOXELS, 3), np.float32)]
        )

    def _add_blocks(self, coords: IntArray) -> None:
        required = self.block_count + len(coords)
        if required > self.config.block_budget:
            raise BlockBudgetExceededError(self.config.block_budget, required)
        ids = self._hash.insert(coords)
        self._reserve(required)
        self._coords[ids] = coords
        self.block_count = required

    # -- allocation and fusion ------------------------------------------------

    def _band_blocks(self, frame: Frame, pose: Pose) -> IntArray:
        """Blocks touched by the +-mu band around every valid depth sample."""
        valid = frame.valid_depth_mask()
        if not valid.any():
            return np.zeros((0, 3), dtype=np.int64)
        rays = pixel_rays(frame.intrinsics)[valid]
        depth = frame.depth[valid]
        lengths = np.linalg.norm(rays, axis=1)
        samples = int(math.ceil(2.0 * self.mu / self.voxel_size)) + 1
        offsets = np.linspace(-self.mu, self.mu, samples)

        def blocks_of(span: tuple[int, int]) -> IntArray:
            a, b = span
            z = depth[a:b, None] + offsets[None, :] / lengths[a:b, None]
            points = pose.apply(rays[a:b, None, :] * z[..., None]).reshape(-1, 3)
            return np.unique(_pack(np.floor(points / self.block_size).astype(np.int64)))

        keys = parallel_map(blocks_of, chunk_ranges(len(depth), PIXEL_GROUP))
        return _unpack(np.unique(np.concatenate(keys)))

    def allocate(self, frame: Frame, pose: Pose) -> int:
        """Allocate every block intersecting the truncation band of `frame`.

        Returns:
            Number of newly allocated blocks.

        Raises:
            BlockBudgetExceededError: If the volume would exceed `block_budget`.
        """
        coords = self._band_blocks(frame, pose)
        if len(coords) == 0:
            return 0
        missing = coords[self._hash.lookup(coords) < 0]
        if len(missing):
            self._add_blocks(missing)
            self.logger.debug(
                f"Allocated {len(missing)} blocks ({self.block_count} total)",
                extra={"frame": frame.index},
            )
        return len(missing)

    def integrate(self, frame: Frame, pose: Pose) -> int:
        """Fuse `frame` into the allocated blocks of its band.

        Each voxel is projected to its nearest pixel; voxels further than `mu`
        behind the observed surface are left untouched.

        Returns:
            Number of updated voxels.
        """
        coords = self._band_blocks(frame, pose)
        ids = self._hash.lookup(coords)
        ids = ids[ids >= 0]
        if len(ids) == 0:
            return 0

        intr = frame.intrinsics
        depth = np.where(frame.valid_depth_mask(), frame.depth, 0.0)
        world_to_camera = pose.inverse()
        mu, w_max = self.mu, self.w_max

        def fuse(span: tuple[int, int]) -> int:
            block_ids = ids[span[0] : span[1]]
            voxels = self._coords[block_ids].astype(np.int64)[:, None, :] * BLOCK_EDGE + _LOCAL
            cam = world_to_camera.apply(voxels * self.voxel_size)
            z = cam[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.rint(intr.fx * cam[..., 0] / z + intr.cx)
                v = np.rint(intr.fy * cam[..., 1] / z + intr.cy)
            inside = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
            ui = np.where(inside, u, 0).astype(np.intp)
            vi = np.where(inside, v, 0).astype(np.intp)
            observed = np.where(inside, depth[vi, ui], 0.0)
            sdf = observed - z
            update = inside & (observed > 0) & (sdf >= -mu)
            if not update.any():
                return 0

            sample = np.clip(sdf / mu, -1.0, 1.0)
            weight = self._weight[block_ids].astype(np.float64)
            tsdf = self._tsdf[block_ids].astype(np.float64)
            color = self._color[block_ids].astype(np.float64)
            rgb = frame.rgb[vi, ui]

            total = weight + 1.0
            tsdf = np.where(update, (tsdf * weight + sample) / total, tsdf)
            color = np.where(
                update[..., None], (color * weight[..., None] + rgb) / total[..., None], color
            )
            weight = np.where(update, np.minimum(total, w_max), weight)

            self._tsdf[block_ids] = tsdf
            self._color[block_ids] = color
            self._weight[block_ids] = weight
            return int(update.sum())

        updated = sum(parallel_map(fuse, chunk_ranges(len(ids), FUSION_GROUP_BLOCKS)))
        self.logger.debug(f"Fused {updated} voxels", extra={"frame": frame.index})
        return updated

    # -- sampling ---------------------------------------------------------------

    def voxel_values(self, voxels: IntArray) -> tuple[Array, Array, Array, NDArray[np.bool_]]:
        """Raw (tsdf, color, weight, allocated) of integer voxel coordinates."""
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        n = len(voxels)
        if n == 0 or self.block_count == 0:
            return np.ones(n), np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=bool)
        blocks = np.floor_divide(voxels, BLOCK_EDGE)
        local = voxels - blocks * BLOCK_EDGE
        keys, inverse = np.unique(_pack(blocks), return_inverse=True)
        ids = self._hash.lookup(_unpack(keys))[inverse.reshape(-1)]
        found = ids >= 0
        safe = np.where(found, ids, 0)
        linear = (local[:, 0] * BLOCK_EDGE + local[:, 1]) * BLOCK_EDGE + local[:, 2]
        tsdf = np.where(found, self._tsdf[safe, linear], 1.0).astype(np.float64)
        weight = np.where(found, self._weight[safe, linear], 0.0).astype(np.float64)
        color = np.where(found[:, None], self._color[safe, linear], 0.0).astype(np.float64)
        return tsdf, color, weight, found

    def _trilinear(self, points: Array, with_color: bool) -> tuple[Array, Array | None, NDArray[np.bool_]]:
        grid = points / self.voxel_size
        base = np.floor(grid)
        frac = grid - base
        corners = base.astype(np.int64)[:, None, :] + _CORNERS
        tsdf, color, weight, found = self.voxel_values(corners.reshape(-1, 3))
        n = len(points)
        tsdf = tsdf.reshape(n, 8)
        observed = (found & (weight > 0)).reshape(n, 8)

        w = np.ones((n, 8))
        for axis in range(3):
            f = frac[:, axis : axis + 1]
            w *= np.where(_CORNERS[:, axis] == 1, f, 1.0 - f)

        value = (w * tsdf).sum(axis=1)
        blended = None
        if with_color:
            blended = (w[..., None] * color.reshape(n, 8, 3)).sum(axis=1)
        return value, blended, observed.all(axis=1)

    def sample_trilinear(self, points: Array) -> tuple[Array, Array, NDArray[np.bool_]]:
        """Trilinear (tsdf, color, valid) at world points of shape (..., 3).

        A sample is invalid when any of its eight voxels is unallocated or has
        zero weight.
        """
        points = np.asarray(points, dtype=np.float64)
        lead = points.shape[:-1]
        tsdf, color, valid = self._trilinear(points.reshape(-1, 3), with_color=True)
        assert color is not None
        return tsdf.reshape(lead), color.reshape(*lead, 3), valid.reshape(lead)

    # -- raycast -----------------------------------------------------------------

    def _depth_range(self, pose: Pose) -> tuple[float, float]:
        centers = (self.block_coords() + 0.5) * self.block_size
        z = (centers - pose.translation) @ pose.rotation[:, 2]
        half_diagonal = 0.5 * math.sqrt(3.0) * self.block_size
        near = max(self.config.near, float(z.min()) - half_diagonal)
        far = min(self.config.far, float(z.max()) + half_diagonal)
        return near, far

    def _march(self, origin: Array, dirs: Array, near: float, far: float) -> Array:
        """Surface z along rays with unit camera-z directions; 0 where nothing is hit."""
        n = len(dirs)
        coarse, fine = 0.8 * self.mu, self.voxel_size
        t = np.full(n, near)
        t_prev = np.full(n, near)
        f_prev = np.zeros(n)
        prev_ok = np.zeros(n, dtype=bool)
        fine_until = np.full(n, -np.inf)
        result = np.zeros(n)
        active = np.arange(n)

        while active.size:
            ta = t[active]
            f, _, ok = self._trilinear(origin + dirs[active] * ta[:, None], with_color=False)
            fp, pok = f_prev[active], prev_ok[active]

            hit = ok & pok & (fp > 0) & (f <= 0)
            if hit.any():
                idx = active[hit]
                tp = t_prev[idx]
                result[idx] = tp + (ta[hit] - tp) * fp[hit] / (fp[hit] - f[hit])

            in_fine = fine_until[active] >= ta
            # Landed behind a surface straight from unobserved space: back up and refine
            overshoot = ok & (f <= 0) & ~pok & ~in_fine & ~hit

            step = np.where((ok & (np.abs(f) < 1.0)) | in_fine, fine, coarse)
            t_next = ta + step
            if overshoot.any():
                back = active[overshoot]
                t_next[overshoot] = np.maximum(t_prev[back], near) + fine
                fine_until[back] = ta[overshoot] + self.mu

            advance = ~overshoot
            moved = active[advance]
            t_prev[moved] = ta[advance]
            f_prev[moved] = f[advance]
            prev_ok[moved] = ok[advance]

            t[active] = t_next
            done = hit | (t_next > far)
            active = active[~done]
        return result

    def raycast(self, pose: Pose, intr: Intrinsics) -> SdfRender:
        """Render the zero crossing seen from `pose`.

        Rays march from the near bound with a coarse step outside the
        truncation band and a voxel step inside it; the crossing is refined by
        linear interpolation between the last positive and first negative sample.
        """
        if self.block_count == 0:
            return SdfRender.empty(intr.shape)
        near, far = self._depth_range(pose)
        if near >= far:
            return SdfRender.empty(intr.shape)

        dirs = pixel_rays(intr).reshape(-1, 3) @ pose.rotation.T
        origin = pose.translation
        parts = parallel_map(
            lambda span: self._march(origin, dirs[span[0] : span[1]], near, far),
            chunk_ranges(len(dirs), RAY_GROUP),
        )
        z = np.concatenate(parts)

        hit = z > 0
        points = origin + dirs[hit] * z[hit, None]
        _, color, color_ok = self._trilinear(points, with_color=True)
        assert color is not None

        h = self.voxel_size
        gradient = np.zeros_like(points)
        gradient_ok = np.ones(len(points), dtype=bool)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            plus, _, ok_plus = self._trilinear(points + offset, with_color=False)
            minus, _, ok_minus = self._trilinear(points - offset, with_color=False)
            gradient[:, axis] = (plus - minus) / (2.0 * h)
            gradient_ok &= ok_plus & ok_minus
        length = np.linalg.norm(gradient, axis=1)
        keep = color_ok & gradient_ok & (length > 0)

        render = SdfRender.empty(intr.shape)
        flat_hit = np.flatnonzero(hit)[keep]
        render.hit.reshape(-1)[flat_hit] = True
        render.depth.reshape(-1)[flat_hit] = z[flat_hit]
        render.vertices.reshape(-1, 3)[flat_hit] = points[keep]
        render.normals.reshape(-1, 3)[flat_hit] = gradient[keep] / length[keep, None]
        render.color.reshape(-1, 3)[flat_hit] = np.clip(color[keep], 0.0, 1.0)
        return render

    # -- mesh extraction ----------------------------------------------------------

    def _mesh_chunk(self, chunk: IntArray) -> tuple[Array, IntArray]:
        edge = MESH_CHUNK_BLOCKS * BLOCK_EDGE + 1
        origin = chunk * (MESH_CHUNK_BLOCKS * BLOCK_EDGE)
        grid = np.stack(np.meshgrid(*(np.arange(edge),) * 3, indexing="ij"), axis=-1)
        tsdf, _, weight, found = self.voxel_values(origin + grid.reshape(-1, 3))
        observed = (found & (weight > 0)).reshape(edge, edge, edge)
        nothing = (np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        if not observed.any():
            return nothing
        volume = np.where(observed, tsdf.reshape(edge, edge, edge), 1.0)
        seen = volume[observed]
        if seen.min() > 0 or seen.max() < 0:
            return nothing

        # A cube is meshed only when all eight corners were observed
        cubes = np.ones((edge - 1,) * 3, dtype=bool)
        for dx, dy, dz in _CORNERS:
            cubes &= observed[dx : dx + edge - 1, dy : dy + edge - 1, dz : dz + edge - 1]
        if not cubes.any():
            return nothing
        mask = np.zeros_like(observed)
        mask[:-1, :-1, :-1] = cubes

        try:
            verts, faces, _, _ = measure.marching_cubes(volume, level=0.0, mask=mask)
        except (ValueError, RuntimeError):
            return nothing
        return (origin + verts.astype(np.float64)) * self.voxel_size, faces.astype(np.int64)

    @log_performance("extract_mesh")
    def extract_mesh(self) -> TriangleMesh:
        """Marching-cubes isosurface at tsdf = 0 over observed voxels."""
        if self.block_count == 0:
            return TriangleMesh.empty()
        chunks = _unique_rows(np.floor_divide(self.block_coords(), MESH_CHUNK_BLOCKS))
        parts = parallel_map(self._mesh_chunk, list(chunks))

        vertices, faces, offset = [], [], 0
        for verts, tris in parts:
            if len(tris):
                vertices.append(verts)
                faces.append(tris + offset)
                offset += len(verts)
        if not faces:
            return TriangleMesh.empty()

        # Weld vertices duplicated on chunk seams
        welded, inverse = np.unique(
            np.round(np.concatenate(vertices), 9), axis=0, return_inverse=True
        )
        tris = inverse.reshape(-1)[np.concatenate(faces)]
        degenerate = (
            (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        )
        tris = tris[~degenerate]

        _, colors, _ = self.sample_trilinear(welded)
        mesh = TriangleMesh(welded, tris, np.clip(colors, 0.0, 1.0))
        self.logger.info(
            f"Extracted mesh with {len(welded)} vertices and {len(tris)} faces",
            extra={"operation": "extract_mesh"},
        )
        return mesh

    # -- snapshots and persistence ------------------------------------------------

    def snapshot(self) -> "TsdfVolume":
        """Independent copy; later fusion into `self` does not affect it."""
        n = self.block_count
        clone = TsdfVolume(self.config)
        clone._hash = self._hash.copy()
        clone._coords = self._coords[:n].copy()
        clone._tsdf = self._tsdf[:n].copy()
        clone._weight = self._weight[:n].copy()
        clone._color = self._color[:n].copy()
        clone.block_count = n
        return clone

    def save(self, path: Path | str) -> None:
        """Write allocated blocks to a compressed `.npz` archive."""
        path = Path(path)
        n = self.block_count
        try:
            with path.open("wb") as fh:
                np.savez_compressed(
                    fh,
                    coords=self._coords[:n],
                    tsdf=self._tsdf[:n],
                    weight=self._weight[:n],
                    color=self._color[:n],
                    voxel_size=self.voxel_size,
                    truncation=self.mu,
                    w_max=self.w_max,
                )
        except OSError as e:
            raise ExportError(f"cannot write volume: {e.strerror}", path) from e

    @classmethod
    def load(cls, path: Path | str, config: TsdfConfig | None = None) -> "TsdfVolume":
        """Read a volume written by `save`; geometry parameters come from the file."""
        path = Path(path)
        try:
            with np.load(path) as data:
                coords = data["coords"].astype(np.int64)
                base = config or TsdfConfig()
                volume = cls(
                    base.model_copy(
                        update={
                            "voxel_size": float(data["voxel_size"]),
                            "truncation": float(data["truncation"]),
                            "w_max": float(data["w_max"]),
                            "block_budget": max(base.block_budget, len(coords)),
                        }
                    )
                )
                volume._add_blocks(coords)
                n = len(coords)
                volume._tsdf[:n] = data["tsdf"]
                volume._weight[:n] = data["weight"]
                volume._color[:n] = data["color"]
        except (OSError, KeyError, ValueError) as e:
            raise DatasetError(f"cannot read volume: {e}", path) from e
        return volume
