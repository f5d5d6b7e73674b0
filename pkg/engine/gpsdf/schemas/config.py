"""Run configuration: pydantic models plus the flat key=value file format.

File format (one entry per line, `#` starts a comment):

    tsdf.voxel_size = 0.005
    pipeline.delta_k = 10
    render.epsilon = 0.02
    tracking.iterations = 4,5,10

Keys in the `pipeline` section map onto top-level `PipelineConfig` fields, every
other section onto the matching sub-config.
"""

import math
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from gpsdf.core.exceptions import ConfigError


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


class TsdfConfig(BaseModel):
    """Voxel-hashed TSDF volume parameters."""

    model_config = ConfigDict(extra="forbid")

    voxel_size: float = Field(0.005, gt=0, description="Voxel edge in meters")
    truncation: float | None = Field(
        None, gt=0, description="Truncation distance in meters (default 4 x voxel_size)"
    )
    w_max: float = Field(100.0, gt=0, description="Fusion weight cap")
    block_budget: int = Field(500_000, ge=1, description="Maximum allocated blocks")
    near: float = Field(0.1, gt=0, description="Ray march near bound (m)")
    far: float = Field(10.0, gt=0, description="Ray march far bound (m)")

    @property
    def mu(self) -> float:
        return self.truncation if self.truncation is not None else 4.0 * self.voxel_size


class IcpConfig(BaseModel):
    """Point-to-plane ICP parameters; iterations are listed coarse to fine."""

    model_config = ConfigDict(extra="forbid")

    levels: int = Field(3, ge=1)
    iterations: list[int] = Field(default_factory=lambda: [4, 5, 10])
    max_distance: float = Field(0.1, gt=0, description="Correspondence gate (m)")
    max_angle_deg: float = Field(30.0, gt=0, le=180)
    epsilon: float = Field(1e-6, gt=0, description="Convergence bound on twist norm")
    max_step_halvings: int = Field(4, ge=0)
    min_inlier_fraction: float = Field(0.1, ge=0, le=1)
    max_condition: float = Field(1e10, gt=1)

    split_iterations = field_validator("iterations", mode="before")(_split_list)

    @field_validator("iterations")
    @classmethod
    def check_iterations(cls, v: list[int]) -> list[int]:
        if not v or any(i < 1 for i in v):
            raise ValueError("iterations must be a non-empty list of counts >= 1")
        return v

    def iterations_for(self, level: int) -> int:
        """Iteration count for pyramid `level` (0 = finest)."""
        coarse_to_fine = self.iterations
        index = len(coarse_to_fine) - 1 - level
        return coarse_to_fine[max(0, min(index, len(coarse_to_fine) - 1))]


class RenderConfig(BaseModel):
    """Gaussian splatting and composition parameters."""

    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(0.02, gt=0, description="Depth-culling slack (m)")
    sh_degree: int = Field(1, ge=0, le=3)
    alpha_cutoff: float = Field(1.0 / 255.0, gt=0, lt=1)
    sdf_weight: float = Field(1.0, description="Fixed SDF color weight W_t")
    lowpass: float = Field(0.3, ge=0, description="Screen-space dilation (px^2)")
    near_clip: float = Field(0.01, gt=0, description="Gaussians closer than this are culled")
    group_size: int = Field(256, ge=1, description="Pixel work items per group")

    @field_validator("sdf_weight")
    @classmethod
    def check_sdf_weight(cls, v: float) -> float:
        if v != 1.0:
            raise ValueError("sdf_weight is fixed to 1")
        return v


class LifecycleConfig(BaseModel):
    """Gaussian adding, keyframing and removal thresholds."""

    model_config = ConfigDict(extra="forbid")

    color_threshold: float = Field(0.05, gt=0)
    weight_threshold: float = Field(4.0, gt=0)
    sample_fraction: float = Field(0.25, gt=0, le=1)
    angle_deg: float = Field(30.0, gt=0)
    move_m: float = Field(0.3, gt=0)
    n_global: int = Field(4, ge=0)
    n_local: int = Field(2, ge=1)
    min_opacity: float = Field(0.005, gt=0)
    max_scale: float = Field(0.1, gt=0)
    min_scale: float = Field(0.003, gt=0)
    initial_opacity: float = Field(0.5, gt=0, lt=1)
    max_init_scale: float = Field(0.1, gt=0)
    fallback_scale_voxels: float = Field(2.0, gt=0)

    @property
    def angle_rad(self) -> float:
        return math.radians(self.angle_deg)


class OptimizerConfig(BaseModel):
    """Adam hyperparameters with per-group learning rates."""

    model_config = ConfigDict(extra="forbid")

    lr_position: float = Field(0.00016, ge=0)
    lr_sh0: float = Field(0.0025, ge=0)
    lr_opacity: float = Field(0.05, ge=0)
    lr_scale: float = Field(0.005, ge=0)
    lr_rotation: float = Field(0.001, ge=0)
    lr_sh_rest: float = Field(0.0005, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-15, gt=0)


class PipelineConfig(BaseModel):
    """Complete run configuration."""

    model_config = ConfigDict(extra="forbid")

    delta_k: int = Field(10, ge=1, description="Gaussian round interval (frames)")
    iterations: int = Field(20, ge=1, description="Optimization iterations per round")
    parallel: bool = False
    seed: int = 0
    continue_on_tracking_loss: bool = False

    tsdf: TsdfConfig = Field(default_factory=TsdfConfig)
    tracking: IcpConfig = Field(default_factory=IcpConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    lifecycle: LifecycleConfig = Field(default_factory=LifecycleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


SECTIONS = ("tsdf", "tracking", "render", "lifecycle", "optimizer")


def parse_key_values(
    text: str, source: Path | str = "<string>"
) -> list[tuple[int, str, str]]:
    """Split key=value text into (line number, key, value) entries."""
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", source, number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in {raw.strip()!r}", source, number)
        entries.append((number, key, value))
    return entries


def _nest(entries: list[tuple[int, str, str]], source: Path | str) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for number, key, value in entries:
        section, _, name = key.partition(".")
        if not name or "." in name:
            raise ConfigError(f"key {key!r} must look like section.name", source, number)
        if section == "pipeline":
            tree[name] = value
        elif section in SECTIONS:
            tree.setdefault(section, {})[name] = value
        else:
            raise ConfigError(f"unknown section {section!r}", source, number)
    return tree


def _line_of(loc: tuple[Any, ...], entries: list[tuple[int, str, str]]) -> int | None:
    parts = [str(p) for p in loc]
    if not parts:
        return None
    key = "pipeline." + parts[0] if parts[0] not in SECTIONS else ".".join(parts[:2])
    for number, entry_key, _ in entries:
        if entry_key == key:
            return number
    return None


def build_config(
    entries: list[tuple[int, str, str]], source: Path | str = "<string>"
) -> PipelineConfig:
    """Validate parsed entries into a `PipelineConfig`; errors carry the line."""
    tree = _nest(entries, source)
    try:
        return PipelineConfig.model_validate(tree)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(
            f"{'.'.join(str(p) for p in first['loc'])}: {first['msg']}",
            source,
            _line_of(tuple(first["loc"]), entries),
        ) from e


def load_config(
    path: Path | str | None = None, overrides: list[str] | None = None
) -> PipelineConfig:
    """Load a config file (all defaults when `path` is None) and apply overrides.

    Args:
        path: key=value configuration file.
        overrides: extra `section.key=value` strings; later entries win.

    Returns:
        Validated PipelineConfig.

    Raises:
        ConfigError: On unreadable files, malformed lines or invalid values.
    """
    entries: list[tuple[int, str, str]] = []
    source: Path | str = "<defaults>"
    if path is not None:
        source = Path(path)
        try:
            text = source.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", source) from e
        entries = parse_key_values(text, source)

    if overrides:
        override_entries = parse_key_values("\n".join(overrides), "<overrides>")
        keys = {key for _, key, _ in override_entries}
        entries = [e for e in entries if e[1] not in keys] + override_entries

    return build_config(entries, source)
