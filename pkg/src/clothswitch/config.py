"""Configuration dataclasses and YAML loading.

Every section of a run config file maps onto one dataclass below.  Unknown
keys are rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised when a configuration file or value fails validation."""


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 9
    cloth_side: float = 0.25
    spring_stiffness: float = 4000.0
    spring_damping: float = 4.0
    ground_friction: float = 40.0
    integration_dt: float = 0.005
    relaxation_steps: int = 60
    obs_size: int = 32
    face_brightness_top: float = 0.75
    face_brightness_bottom: float = 0.35
    background_brightness: float = 0.05
    obs_noise_std: float = 0.02
    coverage_target: float = 0.92
    max_actions: int = 10
    crumple_actions: int = 3
    # fold depths are split into crumple_actions increasing tiers over this range
    crumple_reach: tuple[float, float] = (0.5, 1.8)
    crumple_jitter: float = 0.04
    # pick-and-place mechanics
    drag_steps: int = 20  # minimum carry steps
    drag_speed: float = 0.4  # mean carry speed cap, m/s
    lift_height: float = 0.08
    pick_radius_px: float = 3.0
    pinch_radius_px: float = 0.25
    corner_grasp_radius_px: float = 2.5  # a pick this close to a cloth corner catches it
    workspace_margin: float = 1.5
    # fine raster cells per cloth side used by coverage()
    coverage_resolution: int = 96

    def __post_init__(self) -> None:
        if self.grid_size < 3:
            raise ConfigError("grid_size must be >= 3")
        for name in ("cloth_side", "spring_stiffness", "spring_damping", "ground_friction", "integration_dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("face_brightness_top", "face_brightness_bottom", "background_brightness"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if abs(self.face_brightness_top - self.face_brightness_bottom) < 0.2 - 1e-12:
            raise ConfigError("face brightnesses must differ by at least 0.2")
        if self.obs_noise_std < 0:
            raise ConfigError("obs_noise_std must be >= 0")
        if not 0.0 < self.coverage_target <= 1.0:
            raise ConfigError("coverage_target must lie in (0, 1]")
        if self.max_actions < 1:
            raise ConfigError("max_actions must be >= 1")
        if self.crumple_actions < 0 or self.relaxation_steps < 1 or self.drag_steps < 1:
            raise ConfigError("step counts must be non-negative (relaxation/drag >= 1)")
        object.__setattr__(self, "crumple_reach", tuple(float(r) for r in self.crumple_reach))
        if len(self.crumple_reach) != 2 or not 0 <= self.crumple_reach[0] <= self.crumple_reach[1]:
            raise ConfigError("crumple_reach must be an increasing pair of non-negative reaches")
        if self.crumple_jitter < 0:
            raise ConfigError("crumple_jitter must be >= 0")
        if self.drag_speed <= 0:
            raise ConfigError("drag_speed must be positive")
        if not 0 <= self.pinch_radius_px <= self.pick_radius_px or not 0 <= self.corner_grasp_radius_px <= self.pick_radius_px:
            raise ConfigError("pinch and corner grasp radii must lie in [0, pick_radius_px]")
        if self.obs_size < 4 or self.coverage_resolution < 4:
            raise ConfigError("obs_size and coverage_resolution must be >= 4")

    @property
    def rest_length(self) -> float:
        return self.cloth_side / (self.grid_size - 1)

    @property
    def image_extent(self) -> float:
        """World width covered by the top-down camera (flat cloth fills 164/224 of it)."""
        return self.cloth_side * 224.0 / 164.0


@dataclass(frozen=True)
class ShiftSpec:
    """Parametric sim-to-target perturbation: dynamics multipliers and rendering offsets."""

    stiffness_scale: float = 0.7
    damping_scale: float = 1.3
    friction_scale: float = 1.3
    top_brightness_offset: float = -0.05
    bottom_brightness_offset: float = -0.05
    background_offset: float = 0.03
    noise_offset: float = 0.01

    def __post_init__(self) -> None:
        for name in ("stiffness_scale", "damping_scale", "friction_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def identity(cls) -> "ShiftSpec":
        return cls(1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2.5e-4
    l2_coefficient: float = 1e-5
    minibatch_size: int = 64
    steps_per_epoch: int = 400
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    symmetry_augmentation: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.l2_coefficient < 0:
            raise ConfigError("learning_rate and l2_coefficient must be >= 0")
        if self.minibatch_size < 1 or self.steps_per_epoch < 0:
            raise ConfigError("minibatch_size must be >= 1 and steps_per_epoch >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("moment decay rates must lie in (0, 1) and epsilon > 0")


@dataclass(frozen=True)
class NetConfig:
    hidden_sizes: tuple[int, ...] = (128, 128)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


@dataclass(frozen=True)
class SplineConfig:
    smoothing: float = 30.0
    gradient_gap: float = 1.0

    def __post_init__(self) -> None:
        if self.smoothing < 0 or self.gradient_gap <= 0:
            raise ConfigError("smoothing must be >= 0 and gradient_gap > 0")


@dataclass(frozen=True)
class StoppingConfig:
    """Calibration constants used to derive thresholds from the tuning run."""

    min_history: int = 10
    reward_slack: float = 0.02
    uncertainty_margin: float = 0.10
    early_fraction: float = 0.25
    early_quantile: float = 0.05
    # U/V search: fire no earlier than the tuning run reaches this share of its plateau
    acceptable_fraction: float = 0.95
    max_U: int = 15
    max_V: int = 25

    def __post_init__(self) -> None:
        if self.min_history < 4:
            raise ConfigError("min_history must be >= 4")
        if not 0 <= self.reward_slack < 1 or self.uncertainty_margin < 0:
            raise ConfigError("reward_slack must lie in [0, 1) and uncertainty_margin >= 0")
        if self.max_U < 1 or self.max_V < 1:
            raise ConfigError("max_U and max_V must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    N: int = 60
    K: int = 10
    L: int = 5
    E: int = 5
    holdout_episodes: int = 20
    ensemble_refresh: int = 5
    ensemble_steps: int = 1000
    deploy_episodes: int = 4
    seed: int = 0
    eval_seed: int = 7_000
    holdout_seed: int = 9_000
    tuning_seed: int = 1_000
    env: EnvConfig = field(default_factory=EnvConfig)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    net: NetConfig = field(default_factory=NetConfig)
    spline: SplineConfig = field(default_factory=SplineConfig)
    stopping: StoppingConfig = field(default_factory=StoppingConfig)

    def __post_init__(self) -> None:
        if min(self.K, self.L, self.E, self.holdout_episodes, self.deploy_episodes) < 1:
            raise ConfigError("K, L, E, holdout_episodes and deploy_episodes must be >= 1")
        if self.E < 2:
            raise ConfigError("ensemble size E must be >= 2")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.ensemble_refresh < 1:
            raise ConfigError("ensemble_refresh must be >= 1")

    def config_hash(self) -> str:
        return config_hash(self)


_SECTIONS = {
    "env": EnvConfig,
    "shift": ShiftSpec,
    "optimizer": OptimizerConfig,
    "net": NetConfig,
    "spline": SplineConfig,
    "stopping": StoppingConfig,
}


def _build(cls: type, data: dict[str, Any] | None, where: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{where}]: {exc}") from exc


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    sections = {k: _build(cls, data.get(k), k) for k, cls in _SECTIONS.items()}
    names = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = sorted(set(top) - names)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    return RunConfig(**top, **sections)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return run_config_from_dict(data or {})


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def to_dict(cfg: Any) -> dict[str, Any]:
    """Plain nested dict (tuples become lists) suitable for YAML/JSON."""
    return _plain(dataclasses.asdict(cfg))


def config_hash(cfg: Any) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
