"""Observation and action encoders.

Observations become M x D latent token grids via a small patch autoencoder
that is pretrained on reconstruction and then frozen. Action components pass
through periodic sine/cosine features and per-component MLP branches whose
outputs are concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import InputError
from .optim import Adam, AdamConfig
from .params import ParamSet, uniform_init
from .tensor import (
    DimensionError,
    Tensor,
    concat,
    mlp2,
    mse,
    reshape,
    reverse_accumulate,
)

__all__ = [
    "wrap_angle",
    "ActionTriple",
    "ActionLimits",
    "PeriodicConfig",
    "periodic_embed",
    "LatentState",
    "ActionEncoder",
    "ObservationEncoder",
    "pretrain_encoder",
    "patchify",
    "unpatchify",
]


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class ActionTriple:
    """Forward translation, lateral translation, rotation (body frame)."""

    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_array(arr) -> "ActionTriple":
        return ActionTriple(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class ActionLimits:
    max_step: float = 1.0
    max_turn: float = math.pi / 4

    def contains(self, a: ActionTriple) -> bool:
        return (
            abs(a.x) <= self.max_step + 1e-12
            and abs(a.y) <= self.max_step + 1e-12
            and abs(a.theta) <= self.max_turn + 1e-12
        )

    def clamp(self, a: ActionTriple) -> ActionTriple:
        return ActionTriple(
            min(max(a.x, -self.max_step), self.max_step),
            min(max(a.y, -self.max_step), self.max_step),
            min(max(a.theta, -self.max_turn), self.max_turn),
        )

    def clamp_array(self, arr: np.ndarray) -> np.ndarray:
        bounds = np.array([self.max_step, self.max_step, self.max_turn])
        return np.clip(arr, -bounds, bounds)


@dataclass
class PeriodicConfig:
    """Sine/cosine feature bases: omega_f = max_period^(2f / freq_bases)."""

    freq_bases: int = 4
    max_period: float = 100.0
    invert_frequencies: bool = False
    omegas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.freq_bases < 1:
            raise InputError("freq_bases must be >= 1")
        if self.max_period <= 1:
            raise InputError("max_period must be > 1")
        f = np.arange(self.freq_bases, dtype=np.float64)
        omegas = self.max_period ** (2.0 * f / self.freq_bases)
        if self.invert_frequencies:
            omegas = 1.0 / omegas
        self.omegas = omegas


def periodic_embed(v: float, cfg: PeriodicConfig) -> np.ndarray:
    """Interleaved [cos(v*w_0), sin(v*w_0), ..., cos(v*w_{F-1}), sin(v*w_{F-1})]."""
    phases = v * cfg.omegas
    out = np.empty(2 * cfg.freq_bases)
    out[0::2] = np.cos(phases)
    out[1::2] = np.sin(phases)
    return out


@dataclass
class LatentState:
    """One encoded observation: M spatial tokens of dimension D."""

    tokens: Tensor
    source: str = "encoded"  # "encoded" (from an observation) or "predicted"

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f"latent tokens must be 2D, got shape {self.tokens.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


class ActionEncoder:
    """Per-component periodic features -> branch MLPs -> concatenated embedding."""

    GROUP = "act"

    def __init__(self, params: ParamSet, cfg: ModelConfig, limits: ActionLimits,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.limits = limits
        self.periodic = PeriodicConfig(cfg.freq_bases, cfg.max_period, cfg.invert_frequencies)
        self.params = params
        feat = 2 * cfg.freq_bases
        if f"{self.GROUP}.x.w1" not in params:
            assert rng is not None, "rng required to initialize action encoder weights"
            for branch in ("x", "y", "theta"):
                params.add(f"{self.GROUP}.{branch}.w1", uniform_init(rng, (feat, cfg.branch_hidden), feat))
                params.add(f"{self.GROUP}.{branch}.b1", np.zeros(cfg.branch_hidden))
                params.add(f"{self.GROUP}.{branch}.w2",
                           uniform_init(rng, (cfg.branch_hidden, cfg.branch_dim), cfg.branch_hidden))
                params.add(f"{self.GROUP}.{branch}.b2", np.zeros(cfg.branch_dim))

    def _branch(self, name: str, value: float) -> Tensor:
        feats = Tensor(periodic_embed(value, self.periodic).reshape(1, -1))
        p = self.params
        return mlp2(feats, p[f"{self.GROUP}.{name}.w1"], p[f"{self.GROUP}.{name}.b1"],
                    p[f"{self.GROUP}.{name}.w2"], p[f"{self.GROUP}.{name}.b2"])

    def encode(self, a: ActionTriple) -> Tensor:
        """Embed one action as a (3 * branch_dim,) vector."""
        if not self.limits.contains(a):
            raise InputError(
                f"action {a} exceeds limits (max_step={self.limits.max_step}, "
                f"max_turn={self.limits.max_turn}); clamp before encoding"
            )
        parts = [
            self._branch("x", a.x / self.limits.max_step),
            self._branch("y", a.y / self.limits.max_step),
            self._branch("theta", a.theta / self.limits.max_turn),
        ]
        return reshape(concat(parts, axis=1), (self.cfg.action_dim,))


def patchify(obs: np.ndarray, patch: int) -> np.ndarray:
    """(G, G, C) grid -> (M, patch*patch*C) rows, row-major over the patch grid."""
    g, g2, c = obs.shape
    n = g // patch
    return (
        obs.reshape(n, patch, n, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n * n, patch * patch * c)
    )


def unpatchify(patches: np.ndarray, grid: int, patch: int, channels: int) -> np.ndarray:
    n = grid // patch
    return (
        patches.reshape(n, n, patch, patch, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid, grid, channels)
    )


class ObservationEncoder:
    """Patch autoencoder: grid -> M x D tokens (encode) and back (decode)."""

    def __init__(self, params: ParamSet, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = params
        p, h, d = cfg.patch_dim, cfg.enc_hidden, cfg.token_dim
        if "enc.w1" not in params:
            assert rng is not None, "rng required to initialize encoder weights"
            params.add("enc.w1", uniform_init(rng, (p, h), p))
            params.add("enc.b1", np.zeros(h))
            params.add("enc.w2", uniform_init(rng, (h, d), h))
            params.add("enc.b2", np.zeros(d))
            params.add("dec.w1", uniform_init(rng, (d, h), d))
            params.add("dec.b1", np.zeros(h))
            params.add("dec.w2", uniform_init(rng, (h, p), h))
            params.add("dec.b2", np.zeros(p))

    @property
    def frozen(self) -> bool:
        return self.params.is_frozen("enc") and self.params.is_frozen("dec")

    def freeze(self) -> None:
        self.params.freeze_group("enc")
        self.params.freeze_group("dec")

    def _expect_grid(self, obs: np.ndarray) -> None:
        want = (self.cfg.grid, self.cfg.grid, self.cfg.channels)
        if obs.shape != want:
            raise DimensionError(f"observation shape {obs.shape} != expected {want}")

    def encode_tokens(self, patches: Tensor) -> Tensor:
        p = self.params
        return mlp2(patches, p["enc.w1"], p["enc.b1"], p["enc.w2"], p["enc.b2"])

    def decode_tokens(self, tokens: Tensor) -> Tensor:
        p = self.params
        return mlp2(tokens, p["dec.w1"], p["dec.b1"], p["dec.w2"], p["dec.b2"])

    def encode(self, obs: np.ndarray) -> LatentState:
        """Deterministically map one observation grid to M x D latent tokens."""
        self._expect_grid(obs)
        patches = Tensor(patchify(np.asarray(obs, dtype=np.float64), self.cfg.patch))
        return LatentState(self.encode_tokens(patches), source="encoded")

    def encode_many(self, obs_batch: np.ndarray) -> list[LatentState]:
        """Batch variant of encode for a (n, G, G, C) stack of observations."""
        batch = np.asarray(obs_batch, dtype=np.float64)
        for obs in batch:
            self._expect_grid(obs)
        patches = Tensor(np.stack([patchify(o, self.cfg.patch) for o in batch]))
        tokens = self.encode_tokens(patches)
        return [LatentState(Tensor(t), source="encoded") for t in tokens.data]

    def patch_targets(self, obs: np.ndarray) -> np.ndarray:
        self._expect_grid(obs)
        return patchify(np.asarray(obs, dtype=np.float64), self.cfg.patch)


def pretrain_encoder(
    observations: np.ndarray,
    cfg: ModelConfig,
    train: TrainConfig,
    seed: int,
) -> tuple[ParamSet, ObservationEncoder, list[float]]:
    """Train the patch autoencoder on reconstruction MSE, then freeze it.

    Returns the frozen ParamSet, a ready encoder, and the per-epoch loss trace.
    """
    observations = np.asarray(observations, dtype=np.float64)
    if observations.size == 0:
        raise InputError("pretraining needs a non-empty observation dataset")
    rng = np.random.default_rng(seed)
    params = ParamSet()
    enc = ObservationEncoder(params, cfg, rng)
    opt = Adam(params, AdamConfig(lr=train.pretrain_lr))

    patches = np.stack([patchify(o, cfg.patch) for o in observations])  # (n, M, P)
    n = patches.shape[0]
    losses: list[float] = []
    for _ in range(train.pretrain_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, train.pretrain_batch):
            idx = order[start : start + train.pretrain_batch]
            batch = Tensor(patches[idx])
            recon = enc.decode_tokens(enc.encode_tokens(batch))
            loss = mse(recon, Tensor(patches[idx]))
            params.zero_grads()
            reverse_accumulate(loss)
            opt.step(params.collect_grads())
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
    enc.freeze()
    return params, enc, losses
