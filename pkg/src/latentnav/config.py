"""Run configuration: dataclass sections, TOML load/save, strict key checking."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "ModelConfig",
    "WorldConfig",
    "DatasetConfig",
    "TrainConfig",
    "CEMConfig",
    "EvalConfig",
    "RunConfig",
    "load_config",
    "save_config",
]

SEED_ENV_VAR = "LSNWM_SEED"


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass
class ModelConfig:
    grid: int = 16               # observation grid side length
    channels: int = 3            # observation feature channels
    patch: int = 4               # encoder patch side; tokens_per_frame = (grid/patch)^2
    token_dim: int = 32          # feature dimension per token
    learned_tokens: int = 8      # compact tokens per frame after token learning
    context_frames: int = 4      # history window length
    freq_bases: int = 4          # periodic action embedding bases
    max_period: float = 100.0    # largest period in the frequency law
    invert_frequencies: bool = False
    branch_dim: int = 16         # per-component action branch output width
    branch_hidden: int = 32
    se_hidden: int = 64
    tl_hidden: int = 64
    tf_hidden: int = 64
    head_hidden: int = 64
    enc_hidden: int = 64
    attn_layers: int = 2
    attn_heads: int = 4
    ff_expansion: int = 4
    use_token_learner: bool = True
    use_token_fuser: bool = True
    per_frame_gating: bool = False

    @property
    def tokens_per_frame(self) -> int:
        return (self.grid // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def action_dim(self) -> int:
        return 3 * self.branch_dim

    @property
    def effective_tokens(self) -> int:
        return self.learned_tokens if self.use_token_learner else self.tokens_per_frame

    def validate(self) -> None:
        if self.grid % self.patch != 0:
            raise ConfigError(f"grid {self.grid} must be divisible by patch {self.patch}")
        if self.learned_tokens > self.tokens_per_frame:
            raise ConfigError(
                f"learned_tokens {self.learned_tokens} exceeds tokens_per_frame {self.tokens_per_frame}"
            )
        if self.freq_bases < 1:
            raise ConfigError("freq_bases must be >= 1")
        if self.max_period <= 1:
            raise ConfigError("max_period must be > 1")
        if self.context_frames < 1:
            raise ConfigError("context_frames must be >= 1")
        if self.token_dim % self.attn_heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} must be divisible by attn_heads {self.attn_heads}"
            )
        if not self.use_token_fuser and self.effective_tokens != self.tokens_per_frame:
            raise ConfigError(
                "disabling the token fuser requires learned_tokens == tokens_per_frame "
                "(or disabling the token learner too) so predictions keep the latent shape"
            )


@dataclass
class WorldConfig:
    size: float = 50.0           # square world side, distance units
    obstacle_count: int = 10
    obstacle_min: float = 2.0
    obstacle_max: float = 8.0
    field_cells: int = 64        # landmark value-noise resolution
    field_octaves: int = 3
    raster_per_unit: float = 4.0  # cells per unit for flood fill / shortest path
    view_range: float = 8.0      # forward extent of the egocentric crop
    max_step: float = 1.0        # |x|,|y| limit per action
    max_turn: float = math.pi / 4
    connect_retries: int = 20
    min_connectivity: float = 0.95

    def validate(self) -> None:
        if self.size <= 0 or self.max_step <= 0 or self.max_turn <= 0:
            raise ConfigError("world size and action limits must be positive")
        if self.obstacle_max < self.obstacle_min:
            raise ConfigError("obstacle_max must be >= obstacle_min")


@dataclass
class DatasetConfig:
    num_trajectories: int = 2000
    traj_len: int = 16           # frames per trajectory
    goal_fraction: float = 0.2   # share of goal-directed trajectories
    momentum: float = 0.6        # random-walk action smoothing

    def validate(self) -> None:
        if self.num_trajectories < 1 or self.traj_len < 2:
            raise ConfigError("dataset needs >= 1 trajectory of >= 2 frames")
        if not 0.0 <= self.goal_fraction <= 1.0:
            raise ConfigError("goal_fraction must lie in [0, 1]")


@dataclass
class TrainConfig:
    rollout_steps: int = 4       # supervised prediction steps per window
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0       # 0 disables gradient clipping
    explicit_supervision: bool = False  # supervise decoded observations instead of latents
    pretrain_epochs: int = 40
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3

    def validate(self) -> None:
        if self.rollout_steps < 1:
            raise ConfigError("rollout_steps must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


@dataclass
class CEMConfig:
    horizon: int = 8
    samples: int = 120
    iterations: int = 3
    elite_frac: float = 0.1
    init_std_scale: float = 0.5  # initial std as a fraction of each action limit
    var_floor: float = 1e-4

    def validate(self) -> None:
        if self.samples < 2:
            raise ConfigError("cem samples must be >= 2")
        if not 0.0 < self.elite_frac <= 0.5:
            raise ConfigError("elite_frac must lie in (0, 0.5]")
        if self.var_floor <= 0:
            raise ConfigError("var_floor must be positive")
        if self.horizon < 0 or self.iterations < 1:
            raise ConfigError("horizon must be >= 0 and iterations >= 1")


@dataclass
class EvalConfig:
    episodes: int = 50
    success_radius: float = 2.0
    max_steps: int = 20
    horizon: int = 8             # planned actions per trajectory-prediction episode
    max_goal_distance: float = 4.0
    min_goal_distance: float = 2.5
    action_seconds: float = 0.25  # nominal wall time per action; recorded, unused by metrics

    def validate(self) -> None:
        if self.episodes < 1 or self.max_steps < 1:
            raise ConfigError("episodes and max_steps must be >= 1")
        if self.success_radius <= 0:
            raise ConfigError("success_radius must be positive")


_SECTIONS = {
    "model": ModelConfig,
    "world": WorldConfig,
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "cem": CEMConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cem: CEMConfig = field(default_factory=CEMConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for name in _SECTIONS:
            getattr(self, name).validate()
        min_len = self.model.context_frames + self.train.rollout_steps
        if self.dataset.traj_len < min_len:
            raise ConfigError(
                f"traj_len {self.dataset.traj_len} is too short: training windows need "
                f"context_frames + rollout_steps = {min_len} frames"
            )


def _apply_section(cfg, data: dict, section: str):
    known = {f.name: f for f in fields(cfg)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
            setattr(cfg, key, value)
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
            setattr(cfg, key, value)
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
            setattr(cfg, key, float(value))
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{section}.{key} expects a string, got {value!r}")
            setattr(cfg, key, value)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Build a RunConfig from a TOML file (defaults when path is None).

    The LSNWM_SEED environment variable, when set, overrides the seed.
    """
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as err:
                raise ConfigError(f"{path}: {err}") from err
        for key, value in data.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a section")
                _apply_section(getattr(cfg, key), value, key)
            elif key in ("seed", "workers"):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key} expects an integer, got {value!r}")
                setattr(cfg, key, value)
            elif key == "out_dir":
                if not isinstance(value, str):
                    raise ConfigError(f"out_dir expects a string, got {value!r}")
                cfg.out_dir = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
    cfg.validate()
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def save_config(cfg: RunConfig, path: str | Path) -> None:
    """Echo the exact resolved configuration as TOML (deterministic layout)."""
    lines = [
        f"seed = {cfg.seed}",
        f"out_dir = {_format_value(cfg.out_dir)}",
        f"workers = {cfg.workers}",
        "",
    ]
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        sec = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(sec, f.name))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
