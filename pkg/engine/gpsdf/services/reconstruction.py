"""Online reconstruction: SDF tracking and fusion plus interval Gaussian rounds.

Per frame the SDF side tracks against the previous raycast, fuses the frame
and raycasts the new pose. Every `delta_k` frames a Gaussian round spawns,
optimizes and prunes Gaussians. Rounds read a volume snapshot and never write
the volume; in parallel mode a round runs on its own worker thread while the
following frames are tracked and fused.
"""

from collections.abc import Iterable, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from gpsdf.core.camera import Frame, Intrinsics, build_pyramid
from gpsdf.core.exceptions import DatasetError, MetricError, TrackingLostError
from gpsdf.core.geometry import Pose
from gpsdf.core.logging import LoggerMixin, timed
from gpsdf.schemas.config import PipelineConfig
from gpsdf.schemas.metrics import MetricReport
from gpsdf.services import metrics_service
from gpsdf.services.adam_optimizer import AdamOptimizer
from gpsdf.services.export_service import export_results
from gpsdf.services.gaussians import GaussianGradients, GaussianSet
from gpsdf.services.lifecycle_service import (
    Keyframe,
    KeyframeStore,
    add_mask,
    refresh_views,
    remove,
    select_views,
    spawn,
)
from gpsdf.services.splat_renderer import loss_and_gradients, render_view
from gpsdf.services.tracking_service import TrackResult, track
from gpsdf.services.tsdf_volume import SdfRender, TriangleMesh, TsdfVolume

Array = NDArray[np.float64]


@dataclass
class FrameTiming:
    """Wall time per stage in milliseconds; optimize_ms is 0 without a round."""

    frame: int
    track_ms: float = 0.0
    fuse_ms: float = 0.0
    raycast_ms: float = 0.0
    optimize_ms: float = 0.0


@dataclass(frozen=True)
class RoundStats:
    frame: int
    spawned: int
    removed: int
    count: int
    losses: list[float]


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: Pose
    timing: FrameTiming
    track: TrackResult | None = None
    round_started: bool = False


@dataclass
class ReconResult:
    """Everything a finished run produces."""

    poses: list[Pose]
    timestamps: list[float]
    indices: list[int]
    gaussians: GaussianSet
    volume: TsdfVolume
    mesh: TriangleMesh
    intrinsics: Intrinsics
    timings: list[FrameTiming]
    rounds: list[RoundStats]
    keyframes: list[Keyframe]
    keyframe_renders: dict[int, Array] = field(default_factory=dict)
    metrics: MetricReport = field(default_factory=MetricReport)


class ReconstructionPipeline(LoggerMixin):
    """Frame-by-frame driver holding the volume, the Gaussians and the keyframes."""

    def __init__(
        self,
        config: PipelineConfig,
        intrinsics: Intrinsics,
        initial_pose: Pose | None = None,
    ):
        self.config = config
        self.intrinsics = intrinsics
        self.initial_pose = initial_pose or Pose.identity()

        self.volume = TsdfVolume(config.tsdf)
        self.gaussians = GaussianSet.empty(config.render.sh_degree)
        self.optimizer = AdamOptimizer(config.optimizer)
        self.keyframes = KeyframeStore(config.lifecycle)
        self.rng = np.random.default_rng(config.seed)

        self.records: list[FrameRecord] = []
        self.rounds: list[RoundStats] = []
        self._recent: list[Keyframe] = []
        self._model: SdfRender | None = None
        self._pose = self.initial_pose

        self._worker: ThreadPoolExecutor | None = None
        self._pending: Future[RoundStats] | None = None
        if config.parallel:
            self._worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix="gpsdf-gaussians")

    # -- SDF side -----------------------------------------------------------------

    def _track(self, frame: Frame, timing: FrameTiming) -> tuple[Pose, TrackResult | None]:
        if self._model is None:
            return self.initial_pose, None
        cfg = self.config
        with timed() as sw:
            try:
                result = track(
                    build_pyramid(frame, cfg.tracking.levels),
                    self._model,
                    self._pose,
                    self._pose,
                    cfg.tracking,
                )
            except TrackingLostError as e:
                if not cfg.continue_on_tracking_loss:
                    raise
                self.logger.warning(
                    "%s; keeping the last pose", e, extra={"frame": frame.index}
                )
                result = None
        timing.track_ms = sw.ms
        return (result.pose if result else self._pose), result

    def process_frame(self, frame: Frame) -> FrameRecord:
        """Track, fuse and raycast one frame; launch a Gaussian round on schedule.

        Raises:
            DatasetError: If the frame does not match the pipeline intrinsics.
            TrackingLostError: Unless `continue_on_tracking_loss` is set.
        """
        if frame.intrinsics != self.intrinsics:
            raise DatasetError(f"frame {frame.index} intrinsics differ from the sequence")
        position = len(self.records)
        timing = FrameTiming(frame=frame.index)

        pose, tracked = self._track(frame, timing)

        with timed() as sw:
            self.volume.allocate(frame, pose)
            self.volume.integrate(frame, pose)
        timing.fuse_ms = sw.ms

        with timed() as sw:
            render = self.volume.raycast(pose, self.intrinsics)
        timing.raycast_ms = sw.ms
        self._model = render
        self._pose = pose

        view = Keyframe(pose, frame.rgb, frame.index, render, frame.valid_depth_mask())
        self._recent.append(view)
        self.keyframes.consider(view)

        record = FrameRecord(frame.index, frame.timestamp, pose, timing, tracked)
        if position % self.config.delta_k == 0:
            self._launch_round(view, timing)
            record.round_started = True
        self.records.append(record)

        self.logger.debug(
            "Frame %d: track %.1f ms, fuse %.1f ms, raycast %.1f ms",
            frame.index, timing.track_ms, timing.fuse_ms, timing.raycast_ms,
            extra={"frame": frame.index, "operation": "process_frame"},
        )
        return record

    # -- Gaussian side ------------------------------------------------------------

    def _launch_round(self, view: Keyframe, timing: FrameTiming) -> None:
        keyframes = list(self.keyframes)
        recent, self._recent = self._recent, []
        if self._worker is None:
            self._gaussian_round(view, keyframes, recent, self.volume, timing)
            return
        self.wait()
        self._pending = self._worker.submit(
            self._gaussian_round, view, keyframes, recent, self.volume.snapshot(), timing
        )

    def wait(self) -> None:
        """Block until the running Gaussian round (if any) has finished."""
        if self._pending is not None:
            pending, self._pending = self._pending, None
            pending.result()

    def close(self) -> None:
        """Wait for the running round and release the worker thread."""
        try:
            self.wait()
        finally:
            if self._worker is not None:
                self._worker.shutdown(wait=True)
                self._worker = None

    def _gaussian_round(
        self,
        view: Keyframe,
        keyframes: Sequence[Keyframe],
        recent: Sequence[Keyframe],
        volume: TsdfVolume,
        timing: FrameTiming,
    ) -> RoundStats:
        cfg = self.config
        assert view.render is not None
        with timed() as sw:
            before = len(self.gaussians)
            product = render_view(view.render, self.gaussians, view.pose, self.intrinsics, cfg.render)
            mask = add_mask(
                product.composite,
                view.rgb,
                product.gaussians.weight,
                view.render.hit,
                cfg.lifecycle,
            )
            spawned = spawn(
                mask,
                view.render.vertices,
                view.render.normals,
                view.rgb,
                cfg.lifecycle,
                self.rng,
                cfg.tsdf.voxel_size,
                cfg.render.sh_degree,
            )
            if len(spawned):
                self.gaussians = self.gaussians.concat(spawned)
                self.optimizer.extend(self.gaussians, len(spawned))

            views = refresh_views(
                select_views(keyframes, recent, cfg.lifecycle, self.rng), volume, self.intrinsics
            )
            losses = self.optimize_round(views)

            self.gaussians, removed, keep = remove(self.gaussians, cfg.lifecycle)
            self.optimizer.prune(keep)
            if len(self.gaussians) != before + len(spawned) - removed:
                raise RuntimeError(
                    f"Gaussian count {len(self.gaussians)} != {before} + {len(spawned)} - {removed}"
                )
        timing.optimize_ms = sw.ms

        stats = RoundStats(view.index, len(spawned), removed, len(self.gaussians), losses)
        self.rounds.append(stats)
        self.logger.info(
            "Gaussian round at frame %d: +%d -%d, loss %.4f -> %.4f",
            view.index, stats.spawned, stats.removed, losses[0], losses[-1],
            extra={
                "frame": view.index,
                "operation": "gaussian_round",
                "gaussians": stats.count,
                "duration": sw.ms,
            },
        )
        return stats

    def optimize_round(self, views: Sequence[Keyframe]) -> list[float]:
        """Run the configured iterations over `views`; returns the mean loss per iteration.

        Gradients of all views are averaged into one Adam step per iteration.
        """
        if not views:
            raise ValueError("optimize_round needs at least one view")
        if any(view.render is None for view in views):
            raise ValueError("every view needs a cached SDF render")
        losses = []
        for _ in range(self.config.iterations):
            total = 0.0
            grads = GaussianGradients.zeros_like(self.gaussians)
            for view in views:
                assert view.render is not None
                loss, view_grads = loss_and_gradients(
                    view.render, view.rgb, self.gaussians, view.pose, self.intrinsics,
                    self.config.render,
                )
                total += loss
                grads = grads + view_grads
            losses.append(total / len(views))
            if len(self.gaussians):
                self.optimizer.step(self.gaussians, grads.scaled(1.0 / len(views)))
        return losses

    # -- results ------------------------------------------------------------------

    def render_keyframes(self) -> tuple[dict[int, Array], list[tuple[Array, Array, NDArray[np.bool_]]]]:
        """Composite renders of every keyframe from the final map, plus scoring pairs."""
        renders: dict[int, Array] = {}
        pairs = []
        for kf in self.keyframes:
            product = render_view(self.volume, self.gaussians, kf.pose, self.intrinsics, self.config.render)
            renders[kf.index] = product.composite
            mask = product.sdf.hit if kf.valid is None else product.sdf.hit & kf.valid
            if mask.any():
                pairs.append((product.composite, kf.rgb, mask))
        return renders, pairs

    def finish(
        self,
        truth: Sequence[Pose] | None = None,
        reference: metrics_service.SurfaceSampler | None = None,
    ) -> ReconResult:
        """Wait for the last round and assemble the result with its metrics.

        Args:
            truth: Ground-truth poses, one per processed frame, for ATE.
            reference: Reference surface sampler for accuracy/completion.
        """
        self.close()

        poses = [record.pose for record in self.records]
        mesh = self.volume.extract_mesh()
        renders, pairs = self.render_keyframes()
        report: dict[str, float | None] = {}

        try:
            report["psnr_db"], report["ssim"] = metrics_service.image_scores(pairs)
        except MetricError as e:
            self.logger.warning("Image metrics skipped: %s", e)
        if truth is not None:
            try:
                report["ate_rmse_m"] = metrics_service.ate_rmse(poses, truth)
            except MetricError as e:
                self.logger.warning("ATE skipped: %s", e)
        if reference is not None:
            try:
                scores = metrics_service.geometry_ratios(
                    mesh,
                    reference,
                    seed=self.config.seed,
                    keep=lambda points: metrics_service.frustum_filter(
                        points, poses, self.intrinsics
                    ),
                )
                report.update(
                    acc_m=scores.accuracy,
                    comp_m=scores.completion,
                    acc_ratio_3cm=scores.accuracy_ratio,
                    comp_ratio_3cm=scores.completion_ratio,
                )
            except MetricError as e:
                self.logger.warning("Geometry metrics skipped: %s", e)

        return ReconResult(
            poses=poses,
            timestamps=[record.timestamp for record in self.records],
            indices=[record.index for record in self.records],
            gaussians=self.gaussians,
            volume=self.volume,
            mesh=mesh,
            intrinsics=self.intrinsics,
            timings=[record.timing for record in self.records],
            rounds=list(self.rounds),
            keyframes=list(self.keyframes),
            keyframe_renders=renders,
            metrics=MetricReport.model_validate(report),
        )


def run(
    frames: Iterable[Frame],
    config: PipelineConfig | None = None,
    out_dir: Path | str | None = None,
    truth: Sequence[Pose] | None = None,
    reference: metrics_service.SurfaceSampler | None = None,
    initial_pose: Pose | None = None,
) -> ReconResult:
    """Reconstruct a frame sequence and optionally export the artifacts.

    Raises:
        DatasetError: If `frames` is empty.
        TrackingLostError: When tracking fails and the run is not set to continue.
        ExportError: If an artifact cannot be written.
    """
    config = config or PipelineConfig()
    pipeline: ReconstructionPipeline | None = None
    try:
        for frame in frames:
            if pipeline is None:
                pipeline = ReconstructionPipeline(config, frame.intrinsics, initial_pose)
            pipeline.process_frame(frame)
    finally:
        if pipeline is not None:
            pipeline.close()
    if pipeline is None:
        raise DatasetError("dataset yielded no frames")

    result = pipeline.finish(truth=truth, reference=reference)
    pipeline.logger.info(
        "Reconstructed %d frames",
        len(result.poses),
        extra={"operation": "run", "gaussians": len(result.gaussians)},
    )
    if out_dir is not None:
        export_results(result, out_dir)
    return result
