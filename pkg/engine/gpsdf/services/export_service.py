"""Writers for run artifacts: trajectories, PNGs, PLY meshes, CSV timings.

Every writer turns `OSError` into `ExportError` carrying the path.
"""

import csv
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from gpsdf.core.camera import Intrinsics
from gpsdf.core.exceptions import DatasetError, ExportError
from gpsdf.core.geometry import Pose
from gpsdf.core.logging import get_logger, log_performance
from gpsdf.schemas.metrics import MetricReport
from gpsdf.services.gaussians import save_gaussians
from gpsdf.services.tsdf_volume import TriangleMesh

if TYPE_CHECKING:
    from gpsdf.services.reconstruction import FrameTiming, ReconResult

Array = NDArray[np.float64]

logger = get_logger(__name__)

TIMING_COLUMNS = ("frame", "track_ms", "fuse_ms", "raycast_ms", "optimize_ms")
# Fixed encoder settings so repeated runs produce identical files
PNG_OPTIONS = {"format": "PNG", "optimize": False, "compress_level": 6}


def write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ExportError(f"cannot write file: {e.strerror}", path) from e


def format_pose_line(timestamp: float, pose: Pose) -> str:
    values = [timestamp, *pose.translation, *pose.to_quaternion()]
    return " ".join(f"{v:.6f}" for v in values)


def write_trajectory(
    poses: Sequence[Pose], timestamps: Sequence[float], path: Path | str
) -> None:
    """TUM trajectory lines `timestamp tx ty tz qx qy qz qw`."""
    path = Path(path)
    if len(poses) != len(timestamps):
        raise ValueError(f"{len(poses)} poses but {len(timestamps)} timestamps")
    write_text(
        path, "".join(format_pose_line(t, pose) + "\n" for t, pose in zip(timestamps, poses))
    )


def to_uint8(image: Array) -> NDArray[np.uint8]:
    """[0, 1] image to bytes: clamp, scale by 255, round half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(image: Array, path: Path | str) -> None:
    path = Path(path)
    try:
        Image.fromarray(to_uint8(image)).save(path, **PNG_OPTIONS)
    except OSError as e:
        raise ExportError(f"cannot write image: {e}", path) from e


def write_depth_png(depth: Array, path: Path | str, depth_scale: float = 5000.0) -> None:
    """16-bit depth PNG holding `depth * depth_scale` (0 stays invalid)."""
    path = Path(path)
    raw = np.clip(np.rint(np.asarray(depth) * depth_scale), 0, np.iinfo(np.uint16).max)
    try:
        Image.fromarray(raw.astype(np.uint16)).save(path, **PNG_OPTIONS)
    except OSError as e:
        raise ExportError(f"cannot write depth image: {e}", path) from e


def write_timings(records: Iterable["FrameTiming"], path: Path | str) -> None:
    """CSV with one row per frame."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TIMING_COLUMNS)
            for record in records:
                writer.writerow(
                    [
                        record.frame,
                        f"{record.track_ms:.3f}",
                        f"{record.fuse_ms:.3f}",
                        f"{record.raycast_ms:.3f}",
                        f"{record.optimize_ms:.3f}",
                    ]
                )
    except OSError as e:
        raise ExportError(f"cannot write timings: {e.strerror}", path) from e


def write_metrics(report: MetricReport, path: Path | str) -> None:
    write_text(Path(path), report.to_text())


def write_mesh_ply(mesh: TriangleMesh, path: Path | str) -> None:
    """ASCII PLY with `x y z r g b` vertices (colors 0-255) and triangle faces."""
    path = Path(path)
    colors = to_uint8(mesh.colors)
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vertex_lines = (
        f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n"
        for (x, y, z), (r, g, b) in zip(mesh.vertices, colors)
    )
    face_lines = (f"3 {a} {b} {c}\n" for a, b, c in mesh.faces)
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(header)
            fh.writelines(vertex_lines)
            fh.writelines(face_lines)
    except OSError as e:
        raise ExportError(f"cannot write mesh: {e.strerror}", path) from e


def read_mesh_ply(path: Path | str) -> TriangleMesh:
    """Read an ASCII PLY written by `write_mesh_ply`.

    Raises:
        DatasetError: On unreadable or malformed files.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read mesh: {e.strerror}", path) from e
    try:
        end = lines.index("end_header")
        counts = {
            parts[1]: int(parts[2])
            for parts in (line.split() for line in lines[:end])
            if parts and parts[0] == "element"
        }
        n_vertices, n_faces = counts["vertex"], counts["face"]
        body = lines[end + 1 :]
        vertex_rows = np.array(
            [line.split() for line in body[:n_vertices]], dtype=np.float64
        ).reshape(n_vertices, 6)
        face_rows = np.array(
            [line.split() for line in body[n_vertices : n_vertices + n_faces]], dtype=np.int64
        ).reshape(n_faces, 4)
    except (ValueError, KeyError) as e:
        raise DatasetError(f"malformed PLY: {e}", path) from e
    if np.any(face_rows[:, 0] != 3):
        raise DatasetError("only triangle faces are supported", path)
    return TriangleMesh(
        vertices=vertex_rows[:, :3],
        faces=face_rows[:, 1:],
        colors=vertex_rows[:, 3:] / 255.0,
    )


def write_intrinsics(intr: Intrinsics, path: Path | str) -> None:
    """`calibration.txt`: fx fy cx cy width height depth_scale."""
    write_text(
        Path(path),
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height} "
        f"{intr.depth_scale}\n",
    )


@log_performance("export_results")
def export_results(result: "ReconResult", out_dir: Path | str) -> dict[str, Path]:
    """Write every run artifact into `out_dir`.

    Returns:
        Artifact name -> path.
    """
    out = Path(out_dir)
    renders = out / "renders"
    try:
        renders.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(f"cannot create output directory: {e.strerror}", out) from e

    paths = {
        "trajectory": out / "trajectory.txt",
        "mesh": out / "mesh.ply",
        "gaussians": out / "gaussians.gpsf",
        "volume": out / "volume.npz",
        "timings": out / "timings.csv",
        "metrics": out / "metrics.txt",
        "calibration": out / "calibration.txt",
    }
    write_trajectory(result.poses, result.timestamps, paths["trajectory"])
    write_mesh_ply(result.mesh, paths["mesh"])
    save_gaussians(result.gaussians, paths["gaussians"])
    result.volume.save(paths["volume"])
    write_timings(result.timings, paths["timings"])
    write_metrics(result.metrics, paths["metrics"])
    write_intrinsics(result.intrinsics, paths["calibration"])

    for index, image in result.keyframe_renders.items():
        write_image(image, renders / f"{index:06d}.png")

    logger.info(
        "Exported run artifacts",
        extra={"path": str(out), "gaussians": len(result.gaussians)},
    )
    return paths
