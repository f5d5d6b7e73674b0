"""Command-line surface: `gpsdf run|synth|eval|render`.

Exit codes: 0 on success, 1 for usage, configuration, dataset, export and
metric errors, 2 when tracking is lost.
"""

import argparse
import sys
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from gpsdf import __version__
from gpsdf.core.camera import Intrinsics
from gpsdf.core.exceptions import GpsError, MetricError, TrackingLostError
from gpsdf.core.geometry import Pose
from gpsdf.core.logging import get_logger, log_performance, setup_logging
from gpsdf.datasets.synthetic import generate_synthetic
from gpsdf.datasets.tum import (
    DEFAULT_INTRINSICS,
    associate,
    load_tum,
    read_intrinsics,
    read_rgb,
    read_trajectory,
    write_tum_sequence,
)
from gpsdf.schemas.config import load_config
from gpsdf.schemas.metrics import MetricReport
from gpsdf.schemas.scene import load_scene
from gpsdf.services import metrics_service
from gpsdf.services.export_service import read_mesh_ply, write_image
from gpsdf.services.gaussians import load_gaussians
from gpsdf.services.reconstruction import ReconResult, run
from gpsdf.services.splat_renderer import render_view
from gpsdf.services.tsdf_volume import TsdfVolume

Array = NDArray[np.float64]

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_TRACKING_LOST = 2
DEFAULT_SYNTHETIC_FRAMES = 100


class UsageError(GpsError):
    """Raised for invalid command-line arguments."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises instead of exiting with status 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class CommandStatus:
    exit_code: int = EXIT_OK


@contextmanager
def handle_cli_errors() -> Iterator[CommandStatus]:
    """Map engine errors raised inside the block to an exit code.

    Usage:
        with handle_cli_errors() as status:
            command(args)
        return status.exit_code
    """
    status = CommandStatus()
    try:
        yield status
    except TrackingLostError as e:
        logger.error("Tracking lost: %s", e, extra={"frame": e.frame_index})
        print(f"error: {e}", file=sys.stderr)
        status.exit_code = EXIT_TRACKING_LOST
    except GpsError as e:
        logger.error("%s failed: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        status.exit_code = EXIT_FAILURE


def parse_pose(text: str) -> Pose:
    """`"tx ty tz qx qy qz qw"` to a camera->world pose."""
    try:
        values = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"pose values must be numbers: {text!r}") from e
    if len(values) != 7:
        raise argparse.ArgumentTypeError(f"pose needs 7 values, got {len(values)}")
    try:
        return Pose.from_quaternion(values[:3], values[3:])
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from e
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


# -- run ------------------------------------------------------------------------


@log_performance("cli_run")
def command_run(args: argparse.Namespace) -> ReconResult:
    """Reconstruct a TUM directory or a synthetic scene description."""
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"pipeline.seed={args.seed}")
    if args.parallel:
        overrides.append("pipeline.parallel=true")
    config = load_config(args.config, overrides)

    dataset = Path(args.dataset)
    if dataset.is_dir():
        sequence = load_tum(dataset)
        truth = sequence.truth_poses()
        return run(
            sequence,
            config,
            out_dir=args.out,
            truth=truth,
            initial_pose=truth[0] if truth else None,
        )

    if not dataset.exists():
        raise UsageError(f"dataset not found: {dataset}")
    synthetic = generate_synthetic(load_scene(dataset), args.frames, config.seed)
    return run(
        synthetic.frames,
        config,
        out_dir=args.out,
        truth=synthetic.poses,
        reference=synthetic.scene.sample_surface,
        initial_pose=synthetic.poses[0],
    )


# -- synth ----------------------------------------------------------------------


@log_performance("cli_synth")
def command_synth(args: argparse.Namespace) -> None:
    """Write a synthetic scene as a TUM-layout dataset with ground truth."""
    spec = load_scene(args.scene)
    synthetic = generate_synthetic(spec, args.frames, args.seed)
    write_tum_sequence(args.out, synthetic.frames, synthetic.poses)
    logger.info(
        "Wrote synthetic dataset with %d frames", args.frames, extra={"path": str(args.out)}
    )


# -- eval -----------------------------------------------------------------------


def _truth_trajectory(truth: Path) -> tuple[list[float], list[Pose]]:
    recon = truth / "trajectory.txt"
    return read_trajectory(recon if recon.exists() else truth / "groundtruth.txt")


def _render_pairs(recon: Path, truth: Path) -> list[tuple[Array, Array, NDArray[np.bool_] | None]]:
    """(rendered, reference, mask) per stored keyframe render.

    A reconstruction directory is compared render-to-render; a TUM dataset
    supplies the input frame of the same index, masked to valid depth.
    """
    renders = sorted((recon / "renders").glob("*.png"))
    if (truth / "renders").is_dir():
        return [
            (read_rgb(path), read_rgb(truth / "renders" / path.name), None)
            for path in renders
            if (truth / "renders" / path.name).exists()
        ]
    if not (truth / "rgb.txt").exists():
        return []
    sequence = load_tum(truth)
    pairs = []
    for path in renders:
        index = int(path.stem)
        if index >= len(sequence):
            continue
        frame = sequence.frame(index)
        pairs.append((read_rgb(path), frame.rgb, frame.valid_depth_mask()))
    return pairs


@log_performance("cli_eval")
def command_eval(args: argparse.Namespace) -> MetricReport:
    """Score a reconstruction directory against ground truth and print the report."""
    recon, truth = Path(args.recon), Path(args.truth)
    report: dict[str, float | None] = {}

    stamps, poses = read_trajectory(recon / "trajectory.txt")
    truth_stamps, truth_poses = _truth_trajectory(truth)
    matches = associate(stamps, truth_stamps)
    try:
        report["ate_rmse_m"] = metrics_service.ate_rmse(
            [poses[i] for i, _ in matches], [truth_poses[j] for _, j in matches]
        )
    except MetricError as e:
        logger.warning("ATE skipped: %s", e)

    try:
        report["psnr_db"], report["ssim"] = metrics_service.image_scores(
            _render_pairs(recon, truth)
        )
    except MetricError as e:
        logger.warning("Image metrics skipped: %s", e)

    if (truth / "mesh.ply").exists():
        try:
            scores = metrics_service.geometry_ratios(
                read_mesh_ply(recon / "mesh.ply"),
                metrics_service.mesh_sampler(read_mesh_ply(truth / "mesh.ply")),
            )
            report.update(
                acc_m=scores.accuracy,
                comp_m=scores.completion,
                acc_ratio_3cm=scores.accuracy_ratio,
                comp_ratio_3cm=scores.completion_ratio,
            )
        except MetricError as e:
            logger.warning("Geometry metrics skipped: %s", e)

    result = MetricReport.model_validate(report)
    print(result.to_text(), end="")
    return result


# -- render ---------------------------------------------------------------------


def _render_intrinsics(args: argparse.Namespace) -> Intrinsics:
    if args.calibration is not None:
        return read_intrinsics(Path(args.calibration))
    beside = Path(args.volume).parent / "calibration.txt"
    return read_intrinsics(beside) if beside.exists() else DEFAULT_INTRINSICS


@log_performance("cli_render")
def command_render(args: argparse.Namespace) -> None:
    """Render a stored reconstruction from an arbitrary pose into one PNG."""
    config = load_config(args.config, args.set)
    volume = TsdfVolume.load(args.volume, config.tsdf)
    gaussians = load_gaussians(args.gaussians, config.render.sh_degree)
    product = render_view(volume, gaussians, args.pose, _render_intrinsics(args), config.render)
    write_image(product.composite, args.out)
    logger.info("Rendered novel view", extra={"path": str(args.out), "gaussians": len(gaussians)})


# -- entry point ----------------------------------------------------------------


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="gpsdf", description="Online RGB-D reconstruction with Gaussians on an SDF.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    run_parser = commands.add_parser("run", help="reconstruct a dataset")
    run_parser.add_argument("--dataset", required=True, help="TUM directory or scene description file")
    run_parser.add_argument("--config", help="key=value configuration file")
    run_parser.add_argument("--out", required=True, help="output directory")
    run_parser.add_argument("--seed", type=int, help="override pipeline.seed")
    run_parser.add_argument("--parallel", action="store_true", help="run Gaussian rounds concurrently")
    run_parser.add_argument(
        "--frames", type=positive_int, default=DEFAULT_SYNTHETIC_FRAMES,
        help="frames to generate when --dataset is a scene file",
    )
    run_parser.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value"
    )
    run_parser.set_defaults(handler=command_run)

    synth_parser = commands.add_parser("synth", help="write a synthetic TUM-layout dataset")
    synth_parser.add_argument("--scene", required=True, help="scene description file")
    synth_parser.add_argument("--out", required=True, help="dataset directory to create")
    synth_parser.add_argument("--frames", type=positive_int, required=True)
    synth_parser.add_argument("--seed", type=int, default=0)
    synth_parser.set_defaults(handler=command_synth)

    eval_parser = commands.add_parser("eval", help="score a reconstruction against ground truth")
    eval_parser.add_argument("--recon", required=True, help="output directory of `gpsdf run`")
    eval_parser.add_argument("--truth", required=True, help="TUM dataset or reconstruction directory")
    eval_parser.set_defaults(handler=command_eval)

    render_parser = commands.add_parser("render", help="render a stored reconstruction")
    render_parser.add_argument("--gaussians", required=True, help="GPSF file")
    render_parser.add_argument("--volume", required=True, help="volume .npz file")
    render_parser.add_argument("--pose", required=True, type=parse_pose, help='"tx ty tz qx qy qz qw"')
    render_parser.add_argument("--out", required=True, help="PNG to write")
    render_parser.add_argument("--calibration", help="calibration.txt (default: next to the volume)")
    render_parser.add_argument("--config", help="key=value configuration file")
    render_parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    render_parser.set_defaults(handler=command_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    with handle_cli_errors() as status:
        args = build_parser().parse_args(argv)
        args.handler(args)
    return status.exit_code


if __name__ == "__main__":
    sys.exit(main())
