from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_epochs: int = 40

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.total_epochs < 0:
            raise ValueError(f"total_epochs must be >= 0, got {self.total_epochs}")


def cosine_lr(epoch: float, cfg: SgdConfig) -> float:
    """Cosine-annealed learning rate; ``epoch`` may be fractional."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.total_epochs == 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


class SGD:
    """SGD with a momentum buffer per parameter.

    Update: ``buf = momentum * buf + g``; ``p -= lr * (buf + weight_decay * p)``.
    """

    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig, names: Sequence[str] | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        sgd_step(self.params, grads, lr, self.cfg, self.buffers, self.names)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, cfg: SgdConfig,
             buffers: list | None = None, names: Sequence[str] | None = None) -> Sequence[Tensor]:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient for {label}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if cfg.momentum:
            if buffers is None:
                raise ValueError("momentum > 0 requires a buffer list")
            buf = g.copy() if buffers[i] is None else cfg.momentum * buffers[i] + g
            buffers[i] = buf
            d = buf
        else:
            d = g
        if cfg.weight_decay:
            d = d + cfg.weight_decay * p.data
        p.data = p.data - lr * d
    return params
