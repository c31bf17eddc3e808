"""Action-conditioned latent dynamics model.

One prediction step runs five stages over a rolling window of T latent frames:
channel gating by the action embedding, per-frame token reduction, self-
attention across all historical tokens, fusion back onto the full token grid,
and a temporal-convolution prediction head.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .embedding import ActionEncoder, ActionTriple, LatentState
from .params import ParamSet, uniform_init
from .tensor import (
    ContractError,
    Tensor,
    conv_time_reduce,
    layer_norm,
    linear,
    matmul,
    mlp2,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack,
    transpose,
)

__all__ = ["StateWindow", "TransitionModel"]


class StateWindow:
    """Rolling context of the last T latent states with aligned actions.

    Slot i holds the latent for frame i and the action taken *from* that
    frame; the newest slot's action conditions the next prediction. Pushing
    into a full window evicts the oldest slot.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("window capacity must be >= 1")
        self.capacity = capacity
        self._latents: list[LatentState] = []
        self._actions: list[ActionTriple | None] = []

    def __len__(self) -> int:
        return len(self._latents)

    @property
    def full(self) -> bool:
        return len(self._latents) == self.capacity

    def push(self, latent: LatentState, action: ActionTriple | None = None) -> None:
        self._latents.append(latent)
        self._actions.append(action)
        if len(self._latents) > self.capacity:
            self._latents.pop(0)
            self._actions.pop(0)

    def set_last_action(self, action: ActionTriple) -> None:
        if not self._latents:
            raise ContractError("cannot set an action on an empty window")
        self._actions[-1] = action

    @property
    def latents(self) -> list[LatentState]:
        return list(self._latents)

    @property
    def actions(self) -> list[ActionTriple | None]:
        return list(self._actions)

    @property
    def tags(self) -> list[str]:
        return [s.source for s in self._latents]

    def latents_tensor(self) -> Tensor:
        return stack([s.tokens for s in self._latents], axis=0)

    def copy(self) -> "StateWindow":
        w = StateWindow(self.capacity)
        w._latents = list(self._latents)
        w._actions = list(self._actions)
        return w


class TransitionModel:
    """p(window) -> next latent; owns groups se/tl/attn/tf/head."""

    def __init__(
        self,
        params: ParamSet,
        cfg: ModelConfig,
        action_encoder: ActionEncoder,
        rng: np.random.Generator | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.action_encoder = action_encoder
        self.step_count = 0
        self.record_softmax = False
        self.last_alpha: np.ndarray | None = None
        self.last_attention: list[np.ndarray] = []
        if "head.kernel" not in params:
            assert rng is not None, "rng required to initialize transition weights"
            self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        d = cfg.token_dim
        add = self.params.add

        add("se.w1", uniform_init(rng, (cfg.action_dim, cfg.se_hidden), cfg.action_dim))
        add("se.b1", np.zeros(cfg.se_hidden))
        add("se.w2", uniform_init(rng, (cfg.se_hidden, d), cfg.se_hidden))
        add("se.b2", np.zeros(d))

        if cfg.use_token_learner:
            add("tl.w1", uniform_init(rng, (d, cfg.tl_hidden), d))
            add("tl.b1", np.zeros(cfg.tl_hidden))
            add("tl.w2", uniform_init(rng, (cfg.tl_hidden, cfg.learned_tokens), cfg.tl_hidden))
            add("tl.b2", np.zeros(cfg.learned_tokens))

        a = cfg.context_frames * cfg.effective_tokens
        add("attn.pos", uniform_init(rng, (a, d), d))
        ff = cfg.ff_expansion * d
        for i in range(cfg.attn_layers):
            pre = f"attn.{i}"
            add(f"{pre}.ln1.g", np.ones(d))
            add(f"{pre}.ln1.b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                add(f"{pre}.w{proj}", uniform_init(rng, (d, d), d))
                add(f"{pre}.b{proj}", np.zeros(d))
            add(f"{pre}.ln2.g", np.ones(d))
            add(f"{pre}.ln2.b", np.zeros(d))
            add(f"{pre}.ff.w1", uniform_init(rng, (d, ff), d))
            add(f"{pre}.ff.b1", np.zeros(ff))
            add(f"{pre}.ff.w2", uniform_init(rng, (ff, d), ff))
            add(f"{pre}.ff.b2", np.zeros(d))
        add("attn.out_ln.g", np.ones(d))
        add("attn.out_ln.b", np.zeros(d))

        if cfg.use_token_fuser:
            add("tf.w1", uniform_init(rng, (d, cfg.tf_hidden), d))
            add("tf.b1", np.zeros(cfg.tf_hidden))
            add("tf.w2", uniform_init(rng, (cfg.tf_hidden, a), cfg.tf_hidden))
            add("tf.b2", np.zeros(a))
            add("tf.mix", uniform_init(rng, (a, a), a))
            add("tf.bias", np.zeros(a))

        add("head.kernel", np.full((cfg.context_frames, d), 1.0 / cfg.context_frames))
        add("head.w1", uniform_init(rng, (d, cfg.head_hidden), d))
        add("head.b1", np.zeros(cfg.head_hidden))
        add("head.w2", uniform_init(rng, (cfg.head_hidden, d), cfg.head_hidden))
        add("head.b2", np.zeros(d))

    # -- stage 1: action-conditioned channel gating ---------------------------

    def se_fuse(self, frames: Tensor, z: Tensor) -> Tensor:
        """Gate all frames per channel: frames * sigmoid(MLP(z))."""
        p = self.params
        logits = mlp2(reshape(z, (1, -1)), p["se.w1"], p["se.b1"], p["se.w2"], p["se.b2"])
        gate = sigmoid(reshape(logits, (self.cfg.token_dim,)))
        return frames * gate

    def _se_fuse_per_frame(self, frames: Tensor, actions: list[ActionTriple]) -> Tensor:
        p = self.params
        zs = stack([self.action_encoder.encode(a) for a in actions], axis=0)
        logits = mlp2(zs, p["se.w1"], p["se.b1"], p["se.w2"], p["se.b2"])
        gate = reshape(sigmoid(logits), (self.cfg.context_frames, 1, self.cfg.token_dim))
        return frames * gate

    # -- stage 2: per-frame token reduction ------------------------------------

    def token_learn(self, gated: Tensor) -> Tensor:
        """Reduce each frame's M tokens to K convex combinations."""
        if not self.cfg.use_token_learner:
            if self.record_softmax:
                self.last_alpha = None
            return gated
        p = self.params
        logits = mlp2(gated, p["tl.w1"], p["tl.b1"], p["tl.w2"], p["tl.b2"])
        alpha = softmax(logits, axis=1)  # normalize over the M input tokens
        if self.record_softmax:
            self.last_alpha = alpha.data
        return matmul(transpose(alpha, (0, 2, 1)), gated)

    # -- stage 3: self-attention across all historical tokens ------------------

    def attend_history(self, compact: Tensor) -> Tensor:
        """Flatten T x K tokens, add positional encodings, run pre-norm blocks."""
        cfg = self.cfg
        p = self.params
        t, k, d = compact.shape
        a = t * k
        heads = cfg.attn_heads
        dh = d // heads
        if self.record_softmax:
            self.last_attention = []

        x = reshape(compact, (a, d)) + p["attn.pos"]
        for i in range(cfg.attn_layers):
            pre = f"attn.{i}"
            h = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            q = transpose(reshape(linear(h, p[f"{pre}.wq"], p[f"{pre}.bq"]), (a, heads, dh)), (1, 0, 2))
            key = transpose(reshape(linear(h, p[f"{pre}.wk"], p[f"{pre}.bk"]), (a, heads, dh)), (1, 0, 2))
            v = transpose(reshape(linear(h, p[f"{pre}.wv"], p[f"{pre}.bv"]), (a, heads, dh)), (1, 0, 2))
            scores = scale(matmul(q, transpose(key, (0, 2, 1))), 1.0 / math.sqrt(dh))
            attn = softmax(scores, axis=2)
            if self.record_softmax:
                self.last_attention.append(attn.data)
            ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (a, d))
            x = x + linear(ctx, p[f"{pre}.wo"], p[f"{pre}.bo"])
            h2 = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            x = x + mlp2(h2, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"],
                         p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
        return layer_norm(x, p["attn.out_ln.g"], p["attn.out_ln.b"])

    # -- stage 4: fuse attended tokens back onto the full grid -----------------

    def token_fuse(self, raw_frames: Tensor, attended: Tensor) -> Tensor:
        """Mix attended tokens onto the original window's spatial structure."""
        if not self.cfg.use_token_fuser:
            t = self.cfg.context_frames
            return reshape(attended, (t, self.cfg.effective_tokens, self.cfg.token_dim))
        p = self.params
        weights = sigmoid(
            mlp2(raw_frames, p["tf.w1"], p["tf.b1"], p["tf.w2"], p["tf.b2"])
        )  # (T, M, A)
        values = matmul(p["tf.mix"], attended) + reshape(p["tf.bias"], (-1, 1))  # (A, D)
        return matmul(weights, values)

    # -- stage 5: collapse time and predict the next latent --------------------

    def predict_next(self, fused: Tensor) -> LatentState:
        p = self.params
        pooled = conv_time_reduce(fused, p["head.kernel"])
        out = mlp2(pooled, p["head.w1"], p["head.b1"], p["head.w2"], p["head.b2"])
        return LatentState(out, source="predicted")

    # -- composition ------------------------------------------------------------

    def transition_step(self, window: StateWindow) -> LatentState:
        """Predict the latent one step after the window's newest frame."""
        if not window.full:
            raise ContractError(
                f"transition needs a full window ({window.capacity} slots), got {len(window)}"
            )
        actions = window.actions
        if actions[-1] is None:
            raise ContractError("the newest window slot has no action set")
        raw = window.latents_tensor()
        if self.cfg.per_frame_gating:
            if any(a is None for a in actions):
                raise ContractError("per-frame gating needs an action on every slot")
            gated = self._se_fuse_per_frame(raw, actions)
        else:
            z = self.action_encoder.encode(actions[-1])
            gated = self.se_fuse(raw, z)
        compact = self.token_learn(gated)
        attended = self.attend_history(compact)
        fused = self.token_fuse(raw, attended)
        self.step_count += 1
        return self.predict_next(fused)
