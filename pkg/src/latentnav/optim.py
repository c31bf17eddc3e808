"""Adam with bias correction, operating on a ParamSet by name."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet
from .tensor import DimensionError

__all__ = ["AdamConfig", "AdamState", "Adam"]


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, params: ParamSet, config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.state = AdamState()

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Apply one Adam update to every trainable parameter present in grads."""
        cfg = self.config
        st = self.state
        st.step += 1
        t = st.step
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, param in self.params.trainable():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != param.shape:
                raise DimensionError(
                    f"adam: gradient shape {g.shape} != parameter {name!r} shape {param.shape}"
                )
            m = st.m.get(name)
            if m is None:
                m = np.zeros(param.shape)
                v = np.zeros(param.shape)
            else:
                v = st.v[name]
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            st.m[name] = m
            st.v[name] = v
            m_hat = m / bc1
            v_hat = v / bc2
            param.data = param.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
