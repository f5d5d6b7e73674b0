"""Synthetic scene descriptions for the analytic oracle generator.

Scene files share the config key=value format; primitives are indexed groups:

    camera.width = 160
    camera.fx = 160
    primitive.0.type = sphere
    primitive.0.center = 0,0,0
    primitive.0.radius = 0.5
    primitive.0.texture = checker
    trajectory.kind = orbit
    trajectory.radius = 2.0
"""

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        """Backport of enum.StrEnum (3.11+): str()/format() yield the value."""

        def __str__(self) -> str:
            return str.__str__(self)

        def __format__(self, format_spec: str) -> str:
            return str.__format__(str(self), format_spec)

from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gpsdf.core.camera import Intrinsics
from gpsdf.core.exceptions import ConfigError
from gpsdf.schemas.config import _split_list, parse_key_values


class PrimitiveType(StrEnum):
    """Analytic primitive kinds."""

    SPHERE = "sphere"
    BOX = "box"
    PLANE = "plane"


class TextureType(StrEnum):
    """Solid (3D) albedo textures."""

    CONSTANT = "constant"
    CHECKER = "checker"
    NOISE = "noise"


class TrajectoryKind(StrEnum):
    ORBIT = "orbit"
    JITTER = "jitter"


def _vec3(v: list[float]) -> list[float]:
    if len(v) != 3:
        raise ValueError("expected 3 comma-separated numbers")
    return v


class CameraSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(160, gt=0)
    height: int = Field(120, gt=0)
    fx: float = Field(160.0, gt=0)
    fy: float = Field(160.0, gt=0)
    cx: float | None = None
    cy: float | None = None

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx if self.cx is not None else (self.width - 1) / 2.0,
            cy=self.cy if self.cy is not None else (self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )


class PrimitiveSpec(BaseModel):
    """One primitive; which geometric fields apply depends on `type`."""

    model_config = ConfigDict(extra="forbid")

    type: PrimitiveType
    # sphere
    center: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = Field(0.5, gt=0)
    # box (axis aligned)
    min: list[float] = Field(default_factory=lambda: [-0.5, -0.5, -0.5])
    max: list[float] = Field(default_factory=lambda: [0.5, 0.5, 0.5])
    # plane: normal . p = offset, sampled within `extent` of the foot point
    normal: list[float] = Field(default_factory=lambda: [0.0, 0.0, 1.0])
    offset: float = 0.0
    extent: float = Field(2.0, gt=0)
    # albedo
    texture: TextureType = TextureType.CONSTANT
    color: list[float] = Field(default_factory=lambda: [0.7, 0.7, 0.7])
    color2: list[float] = Field(default_factory=lambda: [0.2, 0.2, 0.2])
    cell: float = Field(0.1, gt=0, description="Checker cell edge (m)")
    noise_amplitude: float = Field(0.15, ge=0)
    noise_frequency: float = Field(12.0, gt=0, description="Highest noise frequency (rad/m)")

    split_vectors = field_validator(
        "center", "min", "max", "normal", "color", "color2", mode="before"
    )(_split_list)
    check_vectors = field_validator("center", "min", "max", "normal", "color", "color2")(_vec3)

    @model_validator(mode="after")
    def check_geometry(self) -> "PrimitiveSpec":
        if self.type == PrimitiveType.BOX and any(
            lo >= hi for lo, hi in zip(self.min, self.max, strict=True)
        ):
            raise ValueError("box min must be below max on every axis")
        if self.type == PrimitiveType.PLANE and sum(c * c for c in self.normal) == 0:
            raise ValueError("plane normal must be non-zero")
        return self


class TrajectorySpec(BaseModel):
    """Look-at orbit around `target`; `jitter` adds bounded per-frame perturbations."""

    model_config = ConfigDict(extra="forbid")

    kind: TrajectoryKind = TrajectoryKind.ORBIT
    target: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = Field(2.0, gt=0)
    height: float = 0.5
    start_deg: float = 0.0
    step_deg: float = Field(0.5, ge=0, description="Orbit angle per frame")
    jitter_deg: float = Field(0.3, ge=0)
    jitter_m: float = Field(0.003, ge=0)

    split_vectors = field_validator("target", mode="before")(_split_list)
    check_vectors = field_validator("target")(_vec3)


class NoiseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth_sigma: float = Field(0.0, ge=0, description="Gaussian depth noise (m)")
    dropout: float = Field(0.0, ge=0, le=1, description="Probability of a depth hole")


class LightSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    direction: list[float] = Field(default_factory=lambda: [0.3, -0.4, 0.85])
    ambient: float = Field(0.35, ge=0, le=1)

    split_vectors = field_validator("direction", mode="before")(_split_list)
    check_vectors = field_validator("direction")(_vec3)


class SceneSpec(BaseModel):
    """Complete synthetic scene description."""

    model_config = ConfigDict(extra="forbid")

    camera: CameraSpec = Field(default_factory=CameraSpec)
    primitives: list[PrimitiveSpec] = Field(..., min_length=1)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    light: LightSpec = Field(default_factory=LightSpec)


_SCENE_SECTIONS = ("camera", "trajectory", "noise", "light")


def parse_scene(text: str, source: Path | str = "<string>") -> SceneSpec:
    """Parse a scene description.

    Raises:
        ConfigError: With the offending line number on malformed or invalid entries.
    """
    entries = parse_key_values(text, source)
    tree: dict[str, Any] = {}
    primitives: dict[int, dict[str, str]] = {}
    lines: dict[tuple[str, ...], int] = {}

    for number, key, value in entries:
        parts = key.split(".")
        if parts[0] == "primitive" and len(parts) == 3 and parts[1].isdigit():
            index = int(parts[1])
            primitives.setdefault(index, {})[parts[2]] = value
            lines[("primitives", parts[1], parts[2])] = number
            lines.setdefault(("primitives", parts[1]), number)
        elif parts[0] in _SCENE_SECTIONS and len(parts) == 2:
            tree.setdefault(parts[0], {})[parts[1]] = value
            lines[(parts[0], parts[1])] = number
        else:
            raise ConfigError(f"unknown scene key {key!r}", source, number)

    if sorted(primitives) != list(range(len(primitives))):
        raise ConfigError("primitive indices must be contiguous from 0", source)
    tree["primitives"] = [primitives[i] for i in sorted(primitives)]

    try:
        return SceneSpec.model_validate(tree)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(str(p) for p in first["loc"])
        line = lines.get(loc[:3]) or lines.get(loc[:2])
        raise ConfigError(f"{'.'.join(loc)}: {first['msg']}", source, line) from e


def load_scene(path: Path | str) -> SceneSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scene: {e.strerror}", path) from e
    return parse_scene(text, path)
