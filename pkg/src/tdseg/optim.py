"""SGD with momentum, weight decay and polynomial learning-rate decay."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

from .tensor import Parameter


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iter: int = 2000
    poly_power: float = 0.9

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be positive, got {self.max_iter}")
        if self.poly_power <= 0:
            raise ValueError(f"poly_power must be positive, got {self.poly_power}")

    def lr(self, iteration: int) -> float:
        """Learning rate at ``iteration``; clamps to 0 from ``max_iter`` on."""
        frac = min(max(iteration, 0), self.max_iter) / self.max_iter
        return self.lr0 * (1.0 - frac) ** self.poly_power


def sgd_step(params: Iterable[Parameter], config: OptimizerConfig, iteration: int) -> float:
    """One momentum-SGD update; returns the learning rate used.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if iteration >= config.max_iter:
        warnings.warn(f"iteration {iteration} >= max_iter {config.max_iter}; learning rate is 0",
                      RuntimeWarning, stacklevel=2)
    lr = config.lr(iteration)
    seen = set()
    for p in params:
        if id(p) in seen:        # aliased (shared) parameters update once
            continue
        seen.add(id(p))
        d_p = p.grad if p.grad is not None else 0.0
        if config.weight_decay:
            d_p = d_p + config.weight_decay * p.data
        buf = p.momentum_buffer
        buf *= config.momentum
        buf += d_p
        p.data -= lr * buf
    return lr
