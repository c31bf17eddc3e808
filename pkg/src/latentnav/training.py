"""Multi-step autoregressive training against frozen-encoder latent targets.

Each training window supplies T context frames plus N future frames. The
model predicts step by step, feeding every prediction back into the window
(with the ground-truth action), and the loss averages the per-step latent MSE.
Gradients flow through the entire rollout chain.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .embedding import ActionTriple, ObservationEncoder
from .errors import InputError
from .optim import Adam, AdamConfig
from .simworld import TrajectoryDataset
from .tensor import ContractError, Tensor, mse, no_grad, reverse_accumulate, scale
from .transition import StateWindow, TransitionModel

__all__ = ["TrainSample", "rollout_loss", "sample_windows", "train", "open_loop_mse"]


@dataclass
class TrainSample:
    """T + N observation frames and the T + N - 1 actions between them."""

    observations: np.ndarray  # (T+N, G, G, C)
    actions: np.ndarray       # (T+N-1, 3)


def sample_windows(
    dataset: TrajectoryDataset,
    context_frames: int,
    rollout_steps: int,
    rng: np.random.Generator,
    per_trajectory: int = 1,
) -> list[TrainSample]:
    """Uniform window starts, ``per_trajectory`` windows from each trajectory."""
    span = context_frames + rollout_steps
    samples = []
    for traj in dataset.trajectories:
        n = traj.observations.shape[0]
        if n < span:
            raise InputError(f"trajectory too short: {n} frames < window span {span}")
        for _ in range(per_trajectory):
            start = int(rng.integers(0, n - span + 1))
            samples.append(
                TrainSample(
                    observations=traj.observations[start : start + span],
                    actions=traj.actions[start : start + span - 1],
                )
            )
    return samples


def rollout_loss(
    sample: TrainSample,
    enc: ObservationEncoder,
    model: TransitionModel,
    rollout_steps: int,
    explicit_supervision: bool = False,
):
    """Mean per-step latent MSE over an N-step autoregressive rollout.

    Returns (loss tensor, final window) so callers can inspect slot tags.
    """
    t = model.cfg.context_frames
    n = rollout_steps
    if sample.observations.shape[0] < t + n:
        raise InputError(
            f"sample has {sample.observations.shape[0]} frames, needs {t + n}"
        )
    if sample.actions.shape[0] < t + n - 1:
        raise InputError("sample is missing actions for the rollout span")

    encoded = enc.encode_many(sample.observations[: t + n])
    window = StateWindow(t)
    for i in range(t):
        window.push(encoded[i], ActionTriple.from_array(sample.actions[i]))

    total = None
    for k in range(1, n + 1):
        pred = model.transition_step(window)
        target_idx = t - 1 + k
        if explicit_supervision:
            target = Tensor(enc.patch_targets(sample.observations[target_idx]))
            step_loss = mse(enc.decode_tokens(pred.tokens), target)
        else:
            step_loss = mse(pred.tokens, encoded[target_idx].tokens)
        total = step_loss if total is None else total + step_loss
        next_action_idx = t - 1 + k
        action = (
            ActionTriple.from_array(sample.actions[next_action_idx])
            if next_action_idx < sample.actions.shape[0]
            else None
        )
        window.push(pred, action)
    return scale(total, 1.0 / n), window


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


def train(
    dataset: TrajectoryDataset,
    enc: ObservationEncoder,
    model: TransitionModel,
    cfg: TrainConfig,
    seed: int,
) -> list[tuple[float, float]]:
    """Mini-batch Adam over shuffled windows; returns (mean_loss, seconds) per epoch."""
    if not enc.frozen:
        raise ContractError("encoder must be frozen before transition training")
    if len(dataset.trajectories) == 0:
        raise InputError("training dataset is empty")
    params = model.params
    opt = Adam(params, AdamConfig(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps))
    enc_before = {n_: t_.data.copy() for n_, t_ in enc.params.items()}

    trace: list[tuple[float, float]] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        samples = sample_windows(dataset, model.cfg.context_frames, cfg.rollout_steps, rng)
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            acc: dict[str, np.ndarray] = {}
            for s in batch:
                loss, _ = rollout_loss(s, enc, model, cfg.rollout_steps, cfg.explicit_supervision)
                params.zero_grads()
                reverse_accumulate(loss)
                epoch_loss += loss.item()
                for name, g in params.collect_grads().items():
                    if name in acc:
                        acc[name] += g
                    else:
                        acc[name] = g.copy()
            grads = {k: v / len(batch) for k, v in acc.items()}
            if cfg.clip_norm > 0.0:
                grads = _clip_grads(grads, cfg.clip_norm)
            opt.step(grads)
        trace.append((epoch_loss / len(samples), time.perf_counter() - t0))

    for name, before in enc_before.items():
        if enc.params[name].data.tobytes() != before.tobytes():
            raise ContractError(f"frozen encoder parameter {name!r} changed during training")
    return trace


def open_loop_mse(
    dataset: TrajectoryDataset,
    enc: ObservationEncoder,
    model: TransitionModel,
    steps: int,
    start: int = 0,
) -> float:
    """Held-out open-loop error: mean latent MSE over `steps` fed-back predictions."""
    t = model.cfg.context_frames
    total = 0.0
    count = 0
    with no_grad():
        for traj in dataset.trajectories:
            sample = TrainSample(
                observations=traj.observations[start : start + t + steps],
                actions=traj.actions[start : start + t + steps - 1],
            )
            loss, _ = rollout_loss(sample, enc, model, steps)
            total += loss.item()
            count += 1
    return total / count
