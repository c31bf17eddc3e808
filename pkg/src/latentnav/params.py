"""Named parameter store with per-group freeze flags and seeded initialization."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["ParamSet", "uniform_init"]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Ordered mapping of dotted names to parameter tensors.

    The prefix before the first dot is the parameter's group ("enc.w1" is in
    group "enc"). Freezing a group clears requires_grad on its members; a
    training step must leave frozen entries bit-identical.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self._params:
            seen.setdefault(self.group_of(name), None)
        return list(seen)

    def freeze_group(self, group: str) -> None:
        self._frozen.add(group)
        for name, t in self._params.items():
            if self.group_of(name) == group:
                t.requires_grad = False
                t.grad = None

    def freeze_all(self) -> None:
        for g in self.groups():
            self.freeze_group(g)

    def is_frozen(self, group: str) -> bool:
        return group in self._frozen

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients for trainable entries; zeros where backward never reached."""
        out = {}
        for name, t in self.trainable():
            out[name] = np.zeros(t.shape) if t.grad is None else t.grad
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()
