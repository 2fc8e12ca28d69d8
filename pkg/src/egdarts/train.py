"""Plain weight training and evaluation loops shared by the search stages and the CLI."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, batches
from .nn import Module
from .optim import SGD, SgdConfig, cosine_lr

log = logging.getLogger(__name__)


def train(model: Module, ds: Dataset, cfg: SgdConfig, batch_size: int, rng: np.random.Generator,
          use_augment: bool = False) -> list[float]:
    """Train for ``cfg.total_epochs`` epochs with cosine annealing; returns per-epoch mean loss.

    Raises FloatingPointError when the loss or a gradient stops being finite.
    """
    named = list(model.named_parameters())
    opt = SGD([p for _, p in named], cfg, [n for n, _ in named])
    params = opt.params
    history = []
    model.train()
    for epoch in range(cfg.total_epochs):
        lr = cosine_lr(epoch, cfg)
        losses = []
        for xb, yb in batches(ds, batch_size, rng, shuffle=True, use_augment=use_augment):
            loss = ag.cross_entropy(model(Tensor(xb)), yb)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            opt.step(ag.grad(loss, params), lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("epoch %d lr %.5f loss %.4f", epoch, lr, history[-1])
    return history


def predict(model: Module, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with ag.no_grad():
        for xb, _ in batches(ds, batch_size, shuffle=False):
            out.append(np.argmax(model(Tensor(xb)).data, axis=1))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def error_rate(model: Module, ds: Dataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, ds, batch_size) != ds.labels))
