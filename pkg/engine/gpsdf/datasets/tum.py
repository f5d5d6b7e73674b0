"""TUM RGB-D sequence loading and writing.

Layout: `rgb.txt` / `depth.txt` list `timestamp path` lines, depth PNGs are
16-bit with a divisor of 5000 per meter, `groundtruth.txt` (optional) holds
`timestamp tx ty tz qx qy qz qw` lines. An optional `calibration.txt`
(`fx fy cx cy width height depth_scale`) overrides the default intrinsics.
"""

from collections import deque
from collections.abc import Iterator, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from gpsdf.core.camera import Frame, Intrinsics
from gpsdf.core.exceptions import DatasetError, ExportError
from gpsdf.core.geometry import Pose
from gpsdf.core.logging import get_logger, log_performance
from gpsdf.services.export_service import (
    format_pose_line,
    write_depth_png,
    write_image,
    write_intrinsics,
    write_text,
)

logger = get_logger(__name__)

MAX_TIME_DIFFERENCE = 0.02
DEFAULT_DEPTH_SCALE = 5000.0
PREFETCH = 4
DEFAULT_INTRINSICS = Intrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480
)


@dataclass(frozen=True)
class Association:
    timestamp: float
    rgb: Path
    depth: Path


@dataclass
class TumSequence:
    """Associated rgb/depth pairs of one sequence; frames decode on iteration."""

    root: Path
    intrinsics: Intrinsics
    associations: list[Association]
    skipped: int = 0
    groundtruth: list[tuple[float, Pose]] | None = None
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __len__(self) -> int:
        return len(self.associations)

    def frame(self, index: int) -> Frame:
        entry = self.associations[index]
        rgb = read_rgb(entry.rgb)
        depth = read_depth(entry.depth, self.depth_scale)
        if rgb.shape[:2] != depth.shape or depth.shape != self.intrinsics.shape:
            raise DatasetError(
                f"image size {rgb.shape[:2]} / {depth.shape} does not match "
                f"calibration {self.intrinsics.shape}",
                entry.rgb,
            )
        return Frame(rgb, depth, self.intrinsics, index, entry.timestamp)

    def __iter__(self) -> Iterator[Frame]:
        """Frames in time order, decoded up to `PREFETCH` frames ahead."""
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="gpsdf-decode") as pool:
            queue: deque[Future[Frame]] = deque()
            upcoming = iter(range(len(self)))
            for index in upcoming:
                queue.append(pool.submit(self.frame, index))
                if len(queue) >= PREFETCH:
                    break
            while queue:
                frame = queue.popleft().result()
                nxt = next(upcoming, None)
                if nxt is not None:
                    queue.append(pool.submit(self.frame, nxt))
                yield frame

    def truth_poses(self) -> list[Pose] | None:
        """Ground-truth pose per association (nearest stamp within 20 ms), or None."""
        if not self.groundtruth:
            return None
        stamps = np.array([t for t, _ in self.groundtruth])
        poses = []
        for entry in self.associations:
            nearest = int(np.argmin(np.abs(stamps - entry.timestamp)))
            if abs(stamps[nearest] - entry.timestamp) > MAX_TIME_DIFFERENCE:
                return None
            poses.append(self.groundtruth[nearest][1])
        return poses


def read_file_list(path: Path) -> list[tuple[float, list[str]]]:
    """`timestamp value...` lines, comments skipped, sorted by time."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot read index file: {e.strerror}", path) from e
    entries = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").replace("\t", " ").split()
        try:
            entries.append((float(parts[0]), parts[1:]))
        except ValueError as e:
            raise DatasetError(f"line {number}: bad timestamp {parts[0]!r}", path) from e
    entries.sort(key=lambda entry: entry[0])
    return entries


def associate(
    first: Sequence[float], second: Sequence[float], max_difference: float = MAX_TIME_DIFFERENCE
) -> list[tuple[int, int]]:
    """Greedy closest-first matching of two timestamp lists; returns index pairs in time order."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    candidates = []
    order = np.argsort(b)
    sorted_b = b[order]
    for i, stamp in enumerate(a):
        lo = np.searchsorted(sorted_b, stamp - max_difference, side="left")
        hi = np.searchsorted(sorted_b, stamp + max_difference, side="right")
        for j in order[lo:hi]:
            candidates.append((abs(stamp - b[j]), i, int(j)))
    candidates.sort()

    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            matches.append((i, j))
    return sorted(matches)


def read_trajectory(path: Path | str) -> tuple[list[float], list[Pose]]:
    """Parse a TUM trajectory file into timestamps and camera->world poses."""
    path = Path(path)
    timestamps, poses = [], []
    for stamp, values in read_file_list(path):
        if len(values) != 7:
            raise DatasetError(f"expected 7 values after timestamp {stamp}", path)
        try:
            numbers = np.array([float(v) for v in values])
            pose = Pose.from_quaternion(numbers[:3], numbers[3:])
        except ValueError as e:
            raise DatasetError(f"bad pose at timestamp {stamp}: {e}", path) from e
        timestamps.append(stamp)
        poses.append(pose)
    return timestamps, poses


def read_intrinsics(path: Path) -> Intrinsics:
    try:
        values = path.read_text(encoding="utf-8").split()
        fx, fy, cx, cy = (float(v) for v in values[:4])
        width, height = int(values[4]), int(values[5])
        depth_scale = float(values[6]) if len(values) > 6 else DEFAULT_DEPTH_SCALE
        return Intrinsics(fx, fy, cx, cy, width, height, depth_scale)
    except OSError as e:
        raise DatasetError(f"cannot read calibration: {e.strerror}", path) from e
    except (ValueError, IndexError) as e:
        raise DatasetError(f"malformed calibration: {e}", path) from e


def read_rgb(path: Path) -> NDArray[np.float64]:
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot read rgb image: {e}", path) from e


def read_depth(path: Path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> NDArray[np.float64]:
    """16-bit depth PNG to meters."""
    try:
        with Image.open(path) as image:
            raw = np.asarray(image)
    except OSError as e:
        raise DatasetError(f"cannot read depth image: {e}", path) from e
    if raw.ndim != 2:
        raise DatasetError("depth image must be single channel", path)
    return raw.astype(np.float64) / depth_scale


def load_tum(
    root: Path | str,
    depth_scale: float | None = None,
    max_difference: float = MAX_TIME_DIFFERENCE,
) -> TumSequence:
    """Index a TUM-layout directory.

    Raises:
        DatasetError: When rgb.txt or depth.txt is missing or malformed.
    """
    root = Path(root)
    rgb_list = read_file_list(root / "rgb.txt")
    depth_list = read_file_list(root / "depth.txt")

    calibration = root / "calibration.txt"
    intrinsics = read_intrinsics(calibration) if calibration.exists() else DEFAULT_INTRINSICS
    scale = depth_scale if depth_scale is not None else intrinsics.depth_scale

    pairs = associate([t for t, _ in rgb_list], [t for t, _ in depth_list], max_difference)
    associations = [
        Association(rgb_list[i][0], root / rgb_list[i][1][0], root / depth_list[j][1][0])
        for i, j in pairs
    ]
    skipped = len(rgb_list) - len(pairs)

    groundtruth = None
    truth_file = root / "groundtruth.txt"
    if truth_file.exists():
        stamps, poses = read_trajectory(truth_file)
        groundtruth = list(zip(stamps, poses))

    if skipped:
        logger.warning(
            "Skipped %d rgb frames without depth within %.0f ms",
            skipped, 1000 * max_difference,
            extra={"path": str(root)},
        )
    logger.info(
        "Loaded TUM sequence with %d frames", len(associations), extra={"path": str(root)}
    )
    return TumSequence(root, intrinsics, associations, skipped, groundtruth, scale)


@log_performance("write_tum_sequence")
def write_tum_sequence(
    root: Path | str,
    frames: Sequence[Frame],
    poses: Sequence[Pose],
) -> None:
    """Materialize frames (and their poses as ground truth) in TUM layout."""
    root = Path(root)
    try:
        (root / "rgb").mkdir(parents=True, exist_ok=True)
        (root / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(f"cannot create dataset directory: {e.strerror}", root) from e

    rgb_lines = ["# color images\n", "# timestamp filename\n"]
    depth_lines = ["# depth maps\n", "# timestamp filename\n"]
    truth_lines = ["# ground truth trajectory\n", "# timestamp tx ty tz qx qy qz qw\n"]
    for frame, pose in zip(frames, poses, strict=True):
        name = f"{frame.timestamp:.6f}.png"
        write_image(frame.rgb, root / "rgb" / name)
        write_depth_png(frame.depth, root / "depth" / name, frame.intrinsics.depth_scale)
        rgb_lines.append(f"{frame.timestamp:.6f} rgb/{name}\n")
        depth_lines.append(f"{frame.timestamp:.6f} depth/{name}\n")
        truth_lines.append(format_pose_line(frame.timestamp, pose) + "\n")

    write_text(root / "rgb.txt", "".join(rgb_lines))
    write_text(root / "depth.txt", "".join(depth_lines))
    write_text(root / "groundtruth.txt", "".join(truth_lines))
    if frames:
        write_intrinsics(frames[0].intrinsics, root / "calibration.txt")
