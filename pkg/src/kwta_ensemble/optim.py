"""Mini-batch SGD with heavy-ball momentum, L2 weight decay and LR decay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .nn import Params

__all__ = ["SgdConfig", "PoisonedStateError", "lr_at", "sgd_step"]

SCHEDULES = ("exponential", "linear")


class PoisonedStateError(FloatingPointError):
    """Non-finite gradients reached the optimizer."""


@dataclass(frozen=True)
class SgdConfig:
    lr_start: float = 1e-1
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    total_steps: int = 1
    schedule: str = "exponential"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.lr_start >= self.lr_end > 0.0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: SgdConfig, step: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based).

    Interpolates from ``lr_start`` at step 0 to ``lr_end`` at the last step,
    geometrically by default or linearly with ``schedule="linear"``.
    """
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    if config.total_steps == 1:
        return config.lr_start
    frac = step / (config.total_steps - 1)
    if config.schedule == "linear":
        return config.lr_start + (config.lr_end - config.lr_start) * frac
    return config.lr_start * math.exp(frac * math.log(config.lr_end / config.lr_start))


def sgd_step(params: Params | Iterable[Params], config: SgdConfig, step: int) -> None:
    """Apply one update in place and clear the gradient buffers.

    ``g = grad + wd * theta``; ``v = momentum * v + g``; ``theta -= lr * v``.
    """
    sets = [params] if isinstance(params, Params) else list(params)
    for p in sets:
        for name, g in p.grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise PoisonedStateError(
                    f"{bad} non-finite gradient entries in {type(p).__name__}.{name} at step {step}"
                )
    lr = lr_at(config, step)
    for p in sets:
        for name, theta in p.values.items():
            g = p.grads[name]
            if config.weight_decay:
                g = g + config.weight_decay * theta
            v = p.velocity[name]
            v *= config.momentum
            v += g
            theta -= lr * v
        p.zero_grad()
        p.version += 1
