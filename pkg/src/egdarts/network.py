"""Macro-architecture genomes, target-network construction and complexity analytics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .search_space import (
    ChannelAdapt,
    DiscreteCell,
    Genotype,
    conv_flops,
    op_flops,
    op_param_count,
)

MIN_INPUT = 4  # smallest side that still yields >= 1 pixel after two halvings


@dataclass(frozen=True)
class Bounds:
    """Box of the macro-architecture variables; integers for v0..v3, reals for v4, v5."""

    v0: tuple[int, int] = (8, 60)
    v1: tuple[int, int] = (1, 6)
    v2: tuple[int, int] = (1, 6)
    v3: tuple[int, int] = (1, 6)
    v4: tuple[float, float] = (1.0, 3.0)
    v5: tuple[float, float] = (1.0, 3.0)

    INTEGER = ("v0", "v1", "v2", "v3")
    REAL = ("v4", "v5")

    def __post_init__(self):
        for name in self.INTEGER + self.REAL:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"bounds for {name}: lower {lo} exceeds upper {hi}")
        if self.v0[0] < 1 or min(self.v1[0], self.v2[0], self.v3[0]) < 1 or min(self.v4[0], self.v5[0]) <= 0:
            raise ValueError("bounds must keep channels, block counts and multipliers positive")

    def to_json(self) -> dict:
        return {k: list(getattr(self, k)) for k in self.INTEGER + self.REAL}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Bounds":
        unknown = set(obj) - set(cls.INTEGER + cls.REAL)
        if unknown:
            raise ValueError(f"unknown bounds keys {sorted(unknown)}")
        kw = {}
        for k, v in obj.items():
            conv = int if k in cls.INTEGER else float
            kw[k] = (conv(v[0]), conv(v[1]))
        return cls(**kw)


TABLE_I_BOUNDS = Bounds()


@dataclass(frozen=True)
class NetworkGenome:
    v0: int
    v1: int
    v2: int
    v3: int
    v4: float
    v5: float
    genotype: Genotype

    @property
    def macro(self) -> tuple:
        return (self.v0, self.v1, self.v2, self.v3, self.v4, self.v5)

    def validate(self, bounds: Bounds = TABLE_I_BOUNDS) -> "NetworkGenome":
        for name in Bounds.INTEGER:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {v!r}")
        for name in Bounds.INTEGER + Bounds.REAL:
            v = getattr(self, name)
            lo, hi = getattr(bounds, name)
            if not math.isfinite(v) or not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        return self

    def with_macro(self, values: Sequence) -> "NetworkGenome":
        v0, v1, v2, v3, v4, v5 = values
        return replace(self, v0=int(v0), v1=int(v1), v2=int(v2), v3=int(v3), v4=float(v4), v5=float(v5))

    def to_json(self) -> dict:
        return {"v0": int(self.v0), "v1": int(self.v1), "v2": int(self.v2), "v3": int(self.v3),
                "v4": float(self.v4), "v5": float(self.v5),
                **self.genotype.to_json()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "NetworkGenome":
        missing = {"v0", "v1", "v2", "v3", "v4", "v5", "normal", "reduce"} - set(obj)
        if missing:
            raise ValueError(f"genome JSON lacks {sorted(missing)}")
        for k in ("v0", "v1", "v2", "v3"):
            if isinstance(obj[k], bool) or not float(obj[k]).is_integer():
                raise ValueError(f"{k} must be an integer, got {obj[k]!r}")
        geno = Genotype.from_json(obj)
        return cls(int(obj["v0"]), int(obj["v1"]), int(obj["v2"]), int(obj["v3"]),
                   float(obj["v4"]), float(obj["v5"]), geno)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def channel_plan(genome: NetworkGenome) -> tuple[int, int, int]:
    c1 = int(genome.v0)
    c2 = max(1, round_half_up(c1 * genome.v4))
    c3 = max(1, round_half_up(c2 * genome.v5))
    return c1, c2, c3


def cell_layout(genome: NetworkGenome) -> list[tuple[bool, int]]:
    """(is_reduction, node width) for every block, stem excluded."""
    c1, c2, c3 = channel_plan(genome)
    return ([(False, c1)] * genome.v1 + [(True, c2)] + [(False, c2)] * genome.v2
            + [(True, c3)] + [(False, c3)] * genome.v3)


def depth(genome: NetworkGenome) -> int:
    """Number of normal blocks; reduction blocks are not counted."""
    return int(genome.v1 + genome.v2 + genome.v3)


class Preprocess(Module):
    """Parameter-free input adaptation: optional spatial halving, then channel adapt."""

    def __init__(self, c_in: int, c_out: int, halve: bool):
        self.halve = halve
        self.adapt = ChannelAdapt(c_in, c_out)
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x: Tensor) -> Tensor:
        if self.halve:
            x = ag.avg_pool2d(x, 3, 2, 1)
        return self.adapt(x)

    def flops(self, h: int, w: int) -> int:
        if self.halve:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return conv_flops(1, 1, self.c_in, self.c_out, 1, h, w) if self.c_in != self.c_out else 0


class Stem(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.bn = BatchNorm2d(c_out)
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x):
        return self.bn(self.conv(x))

    def param_count(self) -> int:
        return 9 * self.c_in * self.c_out

    def flops(self, h, w) -> int:
        return conv_flops(3, 3, self.c_in, self.c_out, 1, h, w)


def stack_preprocessors(layout: Sequence[tuple[bool, int]], stem_channels: int, multiplier: int) -> list[tuple[Preprocess, Preprocess]]:
    """Input adapters for a stack where each block sees the two previous outputs."""
    pre = []
    c_pp, c_p, reduction_prev = stem_channels, stem_channels, False
    for reduction, c in layout:
        pre.append((Preprocess(c_pp, c, reduction_prev), Preprocess(c_p, c, False)))
        c_pp, c_p, reduction_prev = c_p, multiplier * c, reduction
    return pre


class Network(Module):
    """Stem, stacked discrete cells with two reductions, global pooling, linear head."""

    def __init__(self, genome: NetworkGenome, num_classes: int, input_size: tuple[int, int], seed: int = 0,
                 in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.genome = genome
        self.num_classes = num_classes
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        geno = genome.genotype
        self.multiplier = geno.nodes - 3
        self.layout = cell_layout(genome)
        self.stem = Stem(in_channels, genome.v0, rng)
        self.pre = stack_preprocessors(self.layout, genome.v0, self.multiplier)
        self.pre_modules = [m for pair in self.pre for m in pair]
        self.cells = [DiscreteCell(geno.reduce if red else geno.normal, geno.nodes, red, c, rng)
                      for red, c in self.layout]
        self.classifier = Linear(self.multiplier * self.layout[-1][1], num_classes, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for (p0, p1), cell in zip(self.pre, self.cells):
            s0, s1 = s1, cell(p0(s0), p1(s1))
        return self.classifier(ag.global_avg_pool(s1))


def build_network(genome: NetworkGenome, num_classes: int, input_size=(32, 32), seed: int = 0,
                  bounds: Bounds = TABLE_I_BOUNDS) -> Network:
    genome.validate(bounds)
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ShapeError(f"input {h}x{w} is too small for two spatial halvings (need >= {MIN_INPUT})")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return Network(genome, num_classes, (h, w), seed)


def genome_params(genome: NetworkGenome, num_classes: int, in_channels: int = 3) -> int:
    """Trainable scalars of the network a genome builds: stem + every op + classifier."""
    geno = genome.genotype
    total = 9 * in_channels * genome.v0
    for red, c in cell_layout(genome):
        total += sum(op_param_count(o, c, c) for o, _ in (geno.reduce if red else geno.normal))
    c_in = (geno.nodes - 3) * cell_layout(genome)[-1][1]
    return int(total + c_in * num_classes + num_classes)


def genome_flops(genome: NetworkGenome, num_classes: int, input_size=(32, 32), in_channels: int = 3) -> int:
    """Per-image floating-point operations; a multiply-accumulate counts as 2."""
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    geno = genome.genotype
    layout = cell_layout(genome)
    total = conv_flops(3, 3, in_channels, genome.v0, 1, h, w)
    h_pp = h_p = h
    w_pp = w_p = w
    for (p0, p1), (red, c) in zip(stack_preprocessors(layout, genome.v0, geno.nodes - 3), layout):
        total += p0.flops(h_pp, w_pp) + p1.flops(h_p, w_p)
        h_out = (h_p - 1) // 2 + 1 if red else h_p
        w_out = (w_p - 1) // 2 + 1 if red else w_p
        for o, s in geno.reduce if red else geno.normal:
            if red and s < 2:  # cell inputs are halved by the edge itself
                total += op_flops(o, c, c, h_p, w_p, 2)
            else:  # intermediate nodes already sit at the output resolution
                total += op_flops(o, c, c, h_out, w_out, 1)
        h_pp, w_pp, h_p, w_p = h_p, w_p, h_out, w_out
    total += 2 * (geno.nodes - 3) * layout[-1][1] * num_classes
    return int(total)


def count_params(net: Network) -> int:
    return genome_params(net.genome, net.num_classes, net.in_channels)


def allocated_params(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def count_flops(net: Network, input_size=None) -> int:
    return genome_flops(net.genome, net.num_classes, net.input_size if input_size is None else input_size,
                        net.in_channels)


@dataclass
class NetworkAnalytics:
    params: int
    flops: int
    depth: int
    latency_ms: float | None = None

    def __post_init__(self):
        if self.params <= 0:
            raise ValueError(f"params must be > 0, got {self.params}")
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")

    def to_json(self) -> dict:
        return {"params": self.params, "flops": self.flops, "depth": self.depth, "latency_ms": self.latency_ms}


def measure_latency(net: Network, runs: int = 1000, warmup: int = 3) -> float:
    """Mean wall-clock milliseconds of single-image inference."""
    h, w = net.input_size
    x = Tensor(np.random.default_rng(0).standard_normal((1, net.in_channels, h, w)))
    was_training = net.training
    net.eval()
    with ag.no_grad():
        for _ in range(warmup):
            net(x)
        t0 = time.perf_counter()
        for _ in range(runs):
            net(x)
        elapsed = time.perf_counter() - t0
    net.train(was_training)
    return 1000.0 * elapsed / max(runs, 1)


def genome_analytics(genome: NetworkGenome, num_classes: int, input_size=(32, 32)) -> NetworkAnalytics:
    return NetworkAnalytics(genome_params(genome, num_classes), genome_flops(genome, num_classes, input_size),
                            depth(genome))


def analytics(net: Network, latency_runs: int = 0) -> NetworkAnalytics:
    latency = measure_latency(net, latency_runs) if latency_runs > 0 else None
    return NetworkAnalytics(count_params(net), count_flops(net), depth(net.genome), latency)
