"""Gradient descent with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class TrainState:
    """Schedule-side scalars that must survive a checkpoint resume."""

    lr: float
    best_loss: float = float("inf")
    stall: int = 0


class MomentumSGD:
    """v = momentum*v + grad; param -= lr*v.

    Velocity is kept per parameter name so it can be checkpointed and
    restored for exact training resumption.
    """

    def __init__(self, named_params, lr: float = 1e-2, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self._params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self) -> None:
        for name, p in self._params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            if name not in state:
                raise KeyError(f"missing optimizer state for '{name}'")
            arr = np.asarray(state[name])
            if arr.shape != v.shape:
                raise ValueError(
                    f"optimizer state shape mismatch for '{name}': {arr.shape} vs {v.shape}"
                )
            v[...] = arr
