"""Block-level differentiable search with the complexity-aware enhanced gradient.

Each architecture step computes the usual bilevel architecture gradient, fits
a line between recent (expected complexity, validation loss) pairs, and
multiplies the gradient by ``1 + phi`` when the latest move is judged to trade
complexity and loss favourably.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, batches
from .network import Stem, stack_preprocessors
from .nn import Linear, Module, frozen_stats
from .optim import SGD, SgdConfig, cosine_lr
from .search_space import (
    ALL_OPS,
    CELL_TYPES,
    ArchParams,
    CellSpec,
    Genotype,
    MixedCell,
    derive_genotype,
    op_param_count,
    prune_ops,
)

log = logging.getLogger(__name__)

PAPER_STAGES = ((5, 8), (11, 4), (17, 1))
DESK_STAGES = ((2, 8), (3, 4), (4, 1))
DY_GUARD = 1e-12

Arrays = list[np.ndarray]


@dataclass(frozen=True)
class BlockSearchConfig:
    stages: tuple[tuple[int, int], ...] = PAPER_STAGES  # (proxy depth, ops per edge after the stage)
    epochs: int = 40
    batch_size: int = 96
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    arch_lr: float = 0.1
    arch_momentum: float = 0.0
    arch_weight_decay: float = 0.0
    inner_lr: float = 0.025
    fd_radius: float = 0.01
    mode: str = "second_order"
    history_window: int = 10
    phi_cap: float = 10.0
    warmup_steps: int = 5
    enhance: bool = True
    init_channels: int = 16
    num_nodes: int = 7
    alpha_noise: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(d), int(k)) for d, k in self.stages))
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("stages: at least one stage is required")
        prev = len(ALL_OPS)
        for i, (d, k) in enumerate(self.stages):
            if d < 2:
                raise ValueError(f"stages[{i}]: proxy depth must be >= 2, got {d}")
            if not 1 <= k < prev:
                raise ValueError(f"stages[{i}]: op count must drop strictly below {prev}, got {k}")
            prev = k
        if self.stages[-1][1] != 1:
            raise ValueError(f"stages: the last stage must end at 1 op per edge, got {self.stages[-1][1]}")
        if self.mode not in ("first_order", "second_order"):
            raise ValueError(f"mode must be 'first_order' or 'second_order', got {self.mode!r}")
        for name in ("epochs", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "init_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.history_window < 2:
            raise ValueError(f"history_window must be >= 2, got {self.history_window}")
        for name in ("lr", "arch_lr", "inner_lr", "fd_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.phi_cap < 0:
            raise ValueError("phi_cap must be >= 0")
        if self.num_nodes < 4:
            raise ValueError("num_nodes must be >= 4")

    def weight_sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.weight_decay, self.epochs)

    def arch_sgd(self) -> SgdConfig:
        return SgdConfig(self.arch_lr, self.arch_momentum, self.arch_weight_decay, self.epochs)


# enhancement arithmetic -------------------------------------------------------------

class ComplexityLossHistory:
    """Most recent ``window`` (expected complexity, validation loss) pairs in step order."""

    def __init__(self, window: int):
        self.window = window
        self._pairs: deque[tuple[float, float]] = deque(maxlen=window)

    def append(self, x: float, y: float) -> None:
        if not x > 0:
            raise ValueError(f"complexity must be > 0, got {x}")
        self._pairs.append((float(x), float(y)))

    def clear(self) -> None:
        self._pairs.clear()

    def __len__(self) -> int:
        return len(self._pairs)

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return list(self._pairs)


@dataclass(frozen=True)
class ComplexityFit:
    theta0: float
    theta1: float


def _pairs(history) -> list[tuple[float, float]]:
    return history.pairs if isinstance(history, ComplexityLossHistory) else [tuple(p) for p in history]


def fit_theta1(history) -> ComplexityFit | None:
    """Least-squares line ``loss = theta0 + theta1 * complexity``; None when degenerate."""
    pts = _pairs(history)
    m = len(pts)
    if m < 2:
        return None
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    sx, sy = xs.sum(), ys.sum()
    denom = m * (xs * xs).sum() - sx * sx
    if np.all(xs == xs[0]) or denom == 0:
        return None
    theta1 = (m * (xs * ys).sum() - sx * sy) / denom
    theta0 = sy / m - theta1 * sx / m
    return ComplexityFit(float(theta0), float(theta1))


def grad_theta(history) -> float | None:
    """Complexity change over loss change between the last two steps; None when undefined."""
    pts = _pairs(history)
    if len(pts) < 2:
        return None
    (x0, y0), (x1, y1) = pts[-2], pts[-1]
    dy = y1 - y0
    if abs(dy) < DY_GUARD:
        return None
    return (x1 - x0) / dy


def sigma(grad_th: float, theta1: float) -> int:
    return 1 if (grad_th > theta1 or grad_th > 0) else 0


def phi(grad_th: float | None, theta1: float | None, phi_cap: float) -> float:
    if grad_th is None or theta1 is None or theta1 == 0:
        return 0.0
    if not (math.isfinite(grad_th) and math.isfinite(theta1)):
        return 0.0
    raw = sigma(grad_th, theta1) * abs(grad_th) / theta1
    return float(min(max(raw, 0.0), phi_cap)) + 0.0  # sigma = 0 gives -0.0 otherwise


# second-order architecture gradient ---------------------------------------------------

GradFn = Callable[[Arrays], tuple[float, Arrays, Arrays]]  # weights -> (loss, d/dw, d/dalpha)


def _axpy(a: float, xs: Arrays, ys: Arrays) -> Arrays:
    return [y + a * x for x, y in zip(xs, ys)]


def mixed_hvp_fd(train_grads: GradFn, w: Arrays, v: Arrays, eps: float) -> Arrays:
    """Central difference of d(train loss)/d(alpha) along ``v`` in weight space."""
    _, _, g_plus = train_grads(_axpy(eps, v, w))
    _, _, g_minus = train_grads(_axpy(-eps, v, w))
    return [(p - m) / (2 * eps) for p, m in zip(g_plus, g_minus)]


def unrolled_arch_grad(train_grads: GradFn, val_grads: GradFn, w: Arrays, xi: float,
                       fd_radius: float = 0.01) -> tuple[float, Arrays]:
    """Second-order approximation of the architecture gradient.

    Returns the validation loss at the one-step-unrolled weights and
    ``dL_val/dalpha(w') - xi * (dL_train/dalpha(w+) - dL_train/dalpha(w-)) / (2 eps)``.
    """
    _, gw_train, _ = train_grads(w)
    w_prime = _axpy(-xi, gw_train, w)
    val_loss, gw_val, ga_val = val_grads(w_prime)
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in gw_val))
    if norm == 0.0:
        return val_loss, ga_val
    eps = fd_radius / norm
    hvp = mixed_hvp_fd(train_grads, w, gw_val, eps)
    return val_loss, [g - xi * h for g, h in zip(ga_val, hvp)]


# supernet -------------------------------------------------------------------------------

def reduction_positions(depth: int) -> set[int]:
    if depth < 3:
        return {depth - 1}
    return {depth // 3, 2 * depth // 3}


@dataclass(frozen=True)
class SupernetGeometry:
    cells: tuple[tuple[str, int], ...]  # (cell type, node width)
    constant: int  # parameters outside the mixed edges


def expected_complexity(arch: ArchParams, geometry: SupernetGeometry) -> float:
    """Softmax-weighted parameter count of the supernet."""
    total = float(geometry.constant)
    per_type = {}
    for ct in CELL_TYPES:
        per_type[ct] = {}
        for e in arch.edges():
            per_type[ct][e] = arch.weights(ct, e)
    for ct, c in geometry.cells:
        for e in arch.edges():
            w = per_type[ct][e]
            counts = [op_param_count(o, c, c) for o in arch.ops[ct][e]]
            total += float(np.dot(w, counts))
    return total


class Supernet(Module):
    def __init__(self, arch: ArchParams, depth: int, channels: int, num_classes: int,
                 rng: np.random.Generator, in_channels: int = 3):
        self.depth = depth
        reductions = reduction_positions(depth)
        layout, c = [], channels
        for i in range(depth):
            if i in reductions:
                c *= 2
            layout.append((i in reductions, c))
        self.layout = layout
        mult = arch.num_nodes - 3
        self.stem = Stem(in_channels, channels, rng)
        self.pre = stack_preprocessors(layout, channels, mult)
        self.pre_modules = [m for pair in self.pre for m in pair]
        self.cells = [MixedCell(CellSpec(arch.num_nodes, red), c, arch.ops["reduce" if red else "normal"], rng)
                      for red, c in layout]
        self.classifier = Linear(mult * layout[-1][1], num_classes, rng, zero_init=True)

    def forward(self, x: Tensor, arch: ArchParams) -> Tensor:
        s0 = s1 = self.stem(x)
        for (p0, p1), cell in zip(self.pre, self.cells):
            alpha = arch.alpha["reduce" if cell.spec.reduction else "normal"]
            s0, s1 = s1, cell(p0(s0), p1(s1), alpha)
        return self.classifier(ag.global_avg_pool(s1))

    def geometry(self) -> SupernetGeometry:
        const = self.stem.param_count() + self.classifier.weight.size + self.classifier.bias.size
        return SupernetGeometry(tuple(("reduce" if r else "normal", c) for r, c in self.layout), int(const))


def _set_weights(params: Sequence[Tensor], values: Arrays) -> None:
    for p, v in zip(params, values):
        p.data = v


def supernet_grad_fn(net: Supernet, arch: ArchParams, batch) -> GradFn:
    """Loss and gradients on ``batch`` as a function of the weight values."""
    params = net.parameters()
    alphas = arch.tensors()
    xb, yb = Tensor(batch[0]), batch[1]

    def fn(w: Arrays):
        _set_weights(params, w)
        loss = ag.cross_entropy(net(xb, arch), yb)
        grads = ag.grad(loss, params + alphas)
        return loss.item(), grads[:len(params)], grads[len(params):]

    return fn


def arch_gradient(net: Supernet, arch: ArchParams, train_batch, val_batch, cfg: BlockSearchConfig) -> tuple[float, Arrays]:
    """Un-enhanced architecture gradient and the validation loss it was measured at."""
    params = net.parameters()
    w0 = [p.data for p in params]
    val_fn = supernet_grad_fn(net, arch, val_batch)
    with frozen_stats(net):
        try:
            if cfg.mode == "first_order":
                loss, _, ga = val_fn(w0)
            else:
                loss, ga = unrolled_arch_grad(supernet_grad_fn(net, arch, train_batch), val_fn, w0,
                                              cfg.inner_lr, cfg.fd_radius)
        finally:
            _set_weights(params, w0)
    return loss, ga


@dataclass
class StepRecord:
    step: int
    stage: int
    x_k: float
    y_k: float
    theta1: float | None
    grad_theta: float | None
    sigma: int | None
    phi: float


TRACE_COLUMNS = ("step", "x_k", "y_k", "theta1", "grad_theta", "sigma", "phi")


class ArchState:
    """Per-stage architecture optimiser state and the complexity/loss history."""

    def __init__(self, arch: ArchParams, cfg: BlockSearchConfig, stage: int = 0, step0: int = 0):
        self.cfg = cfg
        self.stage = stage
        self.step = step0
        self.stage_steps = 0
        self.history = ComplexityLossHistory(cfg.history_window)
        self.optimizer = SGD(arch.tensors(), cfg.arch_sgd())

    def enhancement(self) -> tuple[float | None, float | None, int | None, float]:
        fit = fit_theta1(self.history)
        gt = grad_theta(self.history)
        t1 = None if fit is None else fit.theta1
        s = None if (gt is None or t1 is None) else sigma(gt, t1)
        p = phi(gt, t1, self.cfg.phi_cap)
        if not self.cfg.enhance or self.stage_steps <= self.cfg.warmup_steps:
            p = 0.0
        return t1, gt, s, p


def apply_arch_update(state: ArchState, grads: Arrays, phi_value: float, lr: float) -> Arrays:
    scaled = [g * (1.0 + phi_value) for g in grads]
    state.optimizer.step(scaled, lr)
    return scaled


def arch_step(net: Supernet, arch: ArchParams, train_batch, val_batch, cfg: BlockSearchConfig,
              state: ArchState, lr: float | None = None) -> StepRecord:
    x_k = expected_complexity(arch, net.geometry())
    y_k, grads = arch_gradient(net, arch, train_batch, val_batch, cfg)
    if not math.isfinite(y_k) or not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError(f"non-finite validation loss or gradient at architecture step {state.step}")
    state.history.append(x_k, y_k)
    state.stage_steps += 1
    t1, gt, s, p = state.enhancement()
    apply_arch_update(state, grads, p, cfg.arch_lr if lr is None else lr)
    rec = StepRecord(state.step, state.stage, x_k, y_k, t1, gt, s, p)
    state.step += 1
    return rec


# progressive search ----------------------------------------------------------------------

@dataclass
class StageSummary:
    stage: int
    depth: int
    ops_before: int
    ops_after: int
    val_accuracy: float
    expected_complexity: float


@dataclass
class SearchResult:
    genotype: Genotype
    arch: ArchParams
    trace: list[StepRecord]
    stages: list[StageSummary]
    final_complexity: float  # expected parameter count of the last supernet

    @property
    def val_accuracy(self) -> float:
        return self.stages[-1].val_accuracy

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trace_to_csv(trace: Iterable[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def supernet_accuracy(net: Supernet, arch: ArchParams, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with ag.no_grad(), frozen_stats(net):
        for xb, yb in batches(ds, batch_size, shuffle=False):
            correct += int(np.sum(np.argmax(net(Tensor(xb), arch).data, axis=1) == yb))
    return correct / len(ds)


def progressive_search(weight_set: Dataset, alpha_set: Dataset, cfg: BlockSearchConfig, seed: int = 0,
                       progress: Callable[[str], None] | None = None) -> SearchResult:
    """Staged search: train a proxy per stage, prune ops between stages, derive the genotype."""
    if len(weight_set) == 0 or len(alpha_set) == 0:
        raise ValueError("both the weight and the architecture sets must be non-empty")
    rng = np.random.default_rng(seed)
    arch = ArchParams.initial(cfg.num_nodes, rng, ALL_OPS, cfg.alpha_noise)
    trace: list[StepRecord] = []
    summaries: list[StageSummary] = []
    step = 0
    net = None
    for stage, (depth, ops_after) in enumerate(cfg.stages):
        ops_before = arch.active_count()
        net = Supernet(arch, depth, cfg.init_channels, weight_set.num_classes, rng)
        params = net.parameters()
        w_opt = SGD(params, cfg.weight_sgd())
        state = ArchState(arch, cfg, stage, step)
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.weight_sgd())
            val_iter = batches(alpha_set, cfg.batch_size, rng)
            for xb, yb in batches(weight_set, cfg.batch_size, rng):
                try:
                    vb = next(val_iter)
                except StopIteration:
                    val_iter = batches(alpha_set, cfg.batch_size, rng)
                    vb = next(val_iter)
                loss = ag.cross_entropy(net(Tensor(xb), arch), yb)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite training loss in stage {stage}, epoch {epoch}")
                w_opt.step(ag.grad(loss, params), lr)
                trace.append(arch_step(net, arch, (xb, yb), vb, cfg, state))
            if progress:
                progress(f"stage {stage} epoch {epoch}: train loss {loss.item():.4f} "
                         f"val loss {trace[-1].y_k:.4f} phi {trace[-1].phi:.3g}")
        step = state.step
        acc = supernet_accuracy(net, arch, alpha_set)
        summaries.append(StageSummary(stage, depth, ops_before, ops_after, acc,
                                      expected_complexity(arch, net.geometry())))
        if ops_after > 1:
            arch, _ = prune_ops(arch, ops_before - ops_after)
    genotype = derive_genotype(arch)
    return SearchResult(genotype, arch, trace, summaries, summaries[-1].expected_complexity)


def genotype_complexity(genotype: Genotype, channels: int = 16) -> int:
    """Parameter count of one normal plus one reduction cell at the given node width."""
    return (sum(op_param_count(o, channels, channels) for o, _ in genotype.normal)
            + sum(op_param_count(o, 2 * channels, 2 * channels) for o, _ in genotype.reduce))
