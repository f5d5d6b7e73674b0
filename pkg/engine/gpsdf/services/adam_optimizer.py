"""Adam over the Gaussian parameters with per-group learning rates."""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from gpsdf.core.logging import LoggerMixin
from gpsdf.schemas.config import OptimizerConfig
from gpsdf.services.gaussians import GaussianGradients, GaussianSet

Array = NDArray[np.float64]


@dataclass(frozen=True)
class ParameterGroup:
    """A slice of one stored parameter array sharing a learning rate."""

    name: str
    attribute: str
    select: Callable[[Array], Array]
    assign: Callable[[Array, Array], None]
    lr: float


def _whole(a: Array) -> Array:
    return a


def _assign_whole(a: Array, value: Array) -> None:
    a[...] = value


def _sh0(a: Array) -> Array:
    return a[:, :1]


def _assign_sh0(a: Array, value: Array) -> None:
    a[:, :1] = value


def _sh_rest(a: Array) -> Array:
    return a[:, 1:]


def _assign_sh_rest(a: Array, value: Array) -> None:
    a[:, 1:] = value


def parameter_groups(cfg: OptimizerConfig) -> tuple[ParameterGroup, ...]:
    return (
        ParameterGroup("position", "positions", _whole, _assign_whole, cfg.lr_position),
        ParameterGroup("sh0", "sh", _sh0, _assign_sh0, cfg.lr_sh0),
        ParameterGroup("sh_rest", "sh", _sh_rest, _assign_sh_rest, cfg.lr_sh_rest),
        ParameterGroup("opacity", "raw_opacity", _whole, _assign_whole, cfg.lr_opacity),
        ParameterGroup("scale", "log_scales", _whole, _assign_whole, cfg.lr_scale),
        ParameterGroup("rotation", "rotations", _whole, _assign_whole, cfg.lr_rotation),
    )


@dataclass
class OptimizerState:
    """First/second moments per parameter group plus the shared step count."""

    first: dict[str, Array] = field(default_factory=dict)
    second: dict[str, Array] = field(default_factory=dict)
    step: int = 0


class AdamOptimizer(LoggerMixin):
    """Adam with bias correction; quaternions are renormalized after each step.

    The state tracks the Gaussian list: `extend` appends zero moments for newly
    spawned Gaussians, `prune` drops the moments of removed ones.
    """

    def __init__(self, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        self.groups = parameter_groups(self.config)
        self.state = OptimizerState()
        self._count = 0

    def _ensure(self, gaussians: GaussianSet) -> None:
        if not self.state.first:
            for group in self.groups:
                shape = group.select(getattr(gaussians, group.attribute)).shape
                self.state.first[group.name] = np.zeros(shape)
                self.state.second[group.name] = np.zeros(shape)
            self._count = len(gaussians)
        if self._count != len(gaussians):
            raise ValueError(
                f"Optimizer tracks {self._count} Gaussians, got {len(gaussians)}"
            )

    def extend(self, gaussians: GaussianSet, added: int) -> None:
        """Append zero moments for `added` Gaussians at the end of `gaussians`."""
        if not self.state.first:
            return
        for group in self.groups:
            tail = group.select(getattr(gaussians, group.attribute))[len(gaussians) - added :]
            for moments in (self.state.first, self.state.second):
                moments[group.name] = np.concatenate(
                    [moments[group.name], np.zeros_like(tail)]
                )
        self._count += added

    def prune(self, keep: NDArray[np.bool_]) -> None:
        """Keep the moments selected by `keep` (same mask as the Gaussian list)."""
        if not self.state.first:
            return
        for moments in (self.state.first, self.state.second):
            for name in moments:
                moments[name] = moments[name][keep]
        self._count = int(keep.sum())

    def step(self, gaussians: GaussianSet, grads: GaussianGradients) -> None:
        """One in-place Adam update of every parameter group."""
        self._ensure(gaussians)
        cfg = self.config
        self.state.step += 1
        t = self.state.step
        bias1 = 1.0 - cfg.beta1**t
        bias2 = 1.0 - cfg.beta2**t

        for group in self.groups:
            param = getattr(gaussians, group.attribute)
            grad = group.select(getattr(grads, group.attribute))
            m = self.state.first[group.name]
            v = self.state.second[group.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            update = group.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            group.assign(param, group.select(param) - update)

        norms = np.linalg.norm(gaussians.rotations, axis=1, keepdims=True)
        gaussians.rotations /= np.where(norms > 0, norms, 1.0)
