"""NSGA-II over the macro variables of a network genome, and the knee-point decision.

Objectives are (validation error, parameter count), both minimised. The cell
genotype is fixed during evolution; only v0..v5 vary.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import Dataset
from .network import (
    TABLE_I_BOUNDS,
    Bounds,
    NetworkAnalytics,
    NetworkGenome,
    build_network,
    channel_plan,
    depth,
    genome_analytics,
    measure_latency,
)
from .optim import SgdConfig
from .search_space import Genotype
from .train import error_rate, train

log = logging.getLogger(__name__)

PARETO_COLUMNS = ("v0", "v1", "v2", "v3", "v4", "v5", "params", "err_pct", "flops", "latency_ms", "depth")


@dataclass(frozen=True)
class EvoConfig:
    population: int = 15
    generations: int = 20
    crossover: float = 0.9
    mutation: float = 0.1
    seed: int = 0
    bounds: Bounds = TABLE_I_BOUNDS
    eta_c: float = 15.0
    eta_m: float = 20.0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")
        if self.generations < 0:
            raise ValueError(f"generations must be >= 0, got {self.generations}")
        for name in ("crossover", "mutation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} probability must lie in [0, 1], got {v}")
        if self.eta_c < 0 or self.eta_m < 0:
            raise ValueError("distribution indices must be >= 0")


@dataclass
class Evaluation:
    err: float
    metrics: NetworkAnalytics
    diverged: bool = False

    @property
    def params(self) -> int:
        return self.metrics.params


@dataclass
class Individual:
    genome: NetworkGenome
    err: float = math.nan
    params: int = 0
    metrics: NetworkAnalytics | None = None
    diverged: bool = False
    rank: int = 0
    crowding: float = 0.0

    @property
    def objectives(self) -> tuple[float, int]:
        return (self.err, self.params)


class Evaluator(Protocol):
    def __call__(self, genome: NetworkGenome) -> Evaluation: ...


def structure_key(genome: NetworkGenome) -> str:
    """Identity of the network a genome builds; genomes with equal keys build equal networks."""
    return json.dumps({"channels": channel_plan(genome), "blocks": [genome.v1, genome.v2, genome.v3],
                       "cells": genome.genotype.to_json()}, sort_keys=True)


def genome_seed(genome: NetworkGenome, master_seed: int) -> int:
    digest = hashlib.sha256(f"{master_seed}|{structure_key(genome)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class SurrogateEvaluator:
    """Deterministic error model for fast runs; no training involved.

    ``kind="tradeoff"`` decays with parameter count and penalises unbalanced
    shapes, so some genomes dominate others. ``kind="inverse"`` is err = scale/params.
    """

    def __init__(self, num_classes: int = 10, input_size=(32, 32), kind: str = "tradeoff", scale: float = 2e4):
        if kind not in ("tradeoff", "inverse"):
            raise ValueError(f"unknown surrogate kind {kind!r}")
        self.num_classes = num_classes
        self.input_size = input_size
        self.kind = kind
        self.scale = scale

    def __call__(self, genome: NetworkGenome) -> Evaluation:
        m = genome_analytics(genome, self.num_classes, self.input_size)
        if self.kind == "inverse":
            err = min(1.0, self.scale / m.params)
        else:
            blocks = (genome.v1, genome.v2, genome.v3)
            err = (0.6 / math.sqrt(1.0 + m.params / self.scale)
                   + 0.02 * abs(genome.v4 - genome.v5) + 0.01 * (max(blocks) - min(blocks)))
            err = min(1.0, err)
        return Evaluation(float(err), m)


class TrainedEvaluator:
    """Build, train briefly on the weight set, measure error on the held-out set.

    Results are cached per network structure; the seed for initialisation and
    batch order comes from the master seed and the structure alone.
    """

    def __init__(self, weight_set: Dataset, alpha_set: Dataset, epochs: int, seed: int = 0,
                 batch_size: int = 128, sgd: SgdConfig | None = None, latency_runs: int = 0,
                 bounds: Bounds = TABLE_I_BOUNDS, use_augment: bool = False):
        if epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {epochs}")
        self.weight_set = weight_set
        self.alpha_set = alpha_set
        self.epochs = epochs
        self.seed = seed
        self.batch_size = batch_size
        base = sgd or SgdConfig()
        self.sgd = replace(base, total_epochs=max(epochs, 1))
        self.latency_runs = latency_runs
        self.bounds = bounds
        self.use_augment = use_augment
        self.cache: dict[str, Evaluation] = {}

    def __call__(self, genome: NetworkGenome) -> Evaluation:
        key = structure_key(genome)
        if key not in self.cache:
            self.cache[key] = self._evaluate(genome)
        return self.cache[key]

    def _evaluate(self, genome: NetworkGenome) -> Evaluation:
        s = genome_seed(genome, self.seed)
        net = build_network(genome, self.weight_set.num_classes, self.weight_set.image_size, seed=s,
                            bounds=self.bounds)
        m = genome_analytics(genome, self.weight_set.num_classes, self.weight_set.image_size)
        try:
            if self.epochs > 0:
                train(net, self.weight_set, self.sgd, self.batch_size, np.random.default_rng(s), self.use_augment)
            err = error_rate(net, self.alpha_set)
        except FloatingPointError as exc:
            log.warning("training diverged for %s: %s", genome.macro, exc)
            return Evaluation(1.0, m, diverged=True)
        if self.latency_runs:
            m.latency_ms = measure_latency(net, self.latency_runs)
        return Evaluation(err, m)


# sorting --------------------------------------------------------------------------------

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(objectives) -> list[list[int]]:
    """Indices grouped into fronts F1, F2, ...; each front in ascending index order."""
    objs = np.asarray(objectives, dtype=float)
    n = len(objs)
    if n == 0:
        return []
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.flatnonzero(dom[i]):
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(objectives) -> np.ndarray:
    objs = np.asarray(objectives, dtype=float)
    n, k = objs.shape if objs.ndim == 2 else (len(objs), 0)
    if n == 0:
        raise ValueError("crowding distance of an empty front")
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for m in range(k):
        order = np.argsort(objs[:, m], kind="stable")
        vals = objs[order, m]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span == 0:
            continue
        dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def assign_rank_and_crowding(pop: list[Individual]) -> list[list[int]]:
    fronts = fast_nondominated_sort([p.objectives for p in pop])
    for r, front in enumerate(fronts, start=1):
        cd = crowding_distance([pop[i].objectives for i in front])
        for i, c in zip(front, cd):
            pop[i].rank = r
            pop[i].crowding = float(c)
    return fronts


def tournament(pop: list[Individual], rng: np.random.Generator) -> Individual:
    i, j = rng.integers(0, len(pop), 2)
    a, b = pop[i], pop[j]
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a if i <= j else b


def environmental_selection(pop: list[Individual], n: int) -> list[Individual]:
    """(mu + lambda) truncation: whole fronts first, the split front by crowding."""
    fronts = assign_rank_and_crowding(pop)
    chosen: list[int] = []
    for front in fronts:
        if len(chosen) + len(front) <= n:
            chosen.extend(front)
            continue
        rest = sorted(front, key=lambda i: (-pop[i].crowding, i))
        chosen.extend(rest[: n - len(chosen)])
        break
    return [pop[i] for i in chosen]


# variation ------------------------------------------------------------------------------

def sbx_pair(p1: float, p2: float, lo: float, hi: float, eta: float, rng: np.random.Generator) -> tuple[float, float]:
    u = rng.random()
    beta = (2 * u) ** (1 / (eta + 1)) if u <= 0.5 else (1 / (2 * (1 - u))) ** (1 / (eta + 1))
    c1 = 0.5 * ((1 + beta) * p1 + (1 - beta) * p2)
    c2 = 0.5 * ((1 - beta) * p1 + (1 + beta) * p2)
    return float(np.clip(c1, lo, hi)), float(np.clip(c2, lo, hi))


def polynomial_mutation(x: float, lo: float, hi: float, eta: float, rng: np.random.Generator) -> float:
    u = rng.random()
    if u < 0.5:
        delta = (2 * u) ** (1 / (eta + 1)) - 1
    else:
        delta = 1 - (2 * (1 - u)) ** (1 / (eta + 1))
    return float(np.clip(x + delta * (hi - lo), lo, hi))


def integer_mutation(x: int, lo: int, hi: int, rng: np.random.Generator) -> int:
    if lo == hi:
        return lo
    step = 1 if rng.random() < 0.5 else -1
    if not lo <= x + step <= hi:
        step = -step
    return int(min(max(x + step, lo), hi))


def crossover(a: NetworkGenome, b: NetworkGenome, cfg: EvoConfig, rng: np.random.Generator):
    va, vb = list(a.macro), list(b.macro)
    for k, name in enumerate(Bounds.INTEGER):
        if rng.random() < 0.5:
            va[k], vb[k] = vb[k], va[k]
    for k, name in enumerate(Bounds.REAL, start=len(Bounds.INTEGER)):
        lo, hi = getattr(cfg.bounds, name)
        va[k], vb[k] = sbx_pair(va[k], vb[k], lo, hi, cfg.eta_c, rng)
    return a.with_macro(va), b.with_macro(vb)


def mutate(g: NetworkGenome, cfg: EvoConfig, rng: np.random.Generator) -> NetworkGenome:
    v = list(g.macro)
    for k, name in enumerate(Bounds.INTEGER + Bounds.REAL):
        if rng.random() >= cfg.mutation:
            continue
        lo, hi = getattr(cfg.bounds, name)
        if name in Bounds.INTEGER:
            v[k] = integer_mutation(int(v[k]), lo, hi, rng)
        else:
            v[k] = polynomial_mutation(float(v[k]), lo, hi, cfg.eta_m, rng)
    return g.with_macro(v)


def make_offspring(pop: list[Individual], cfg: EvoConfig, rng: np.random.Generator) -> list[NetworkGenome]:
    out: list[NetworkGenome] = []
    while len(out) < cfg.population:
        a, b = tournament(pop, rng).genome, tournament(pop, rng).genome
        if rng.random() < cfg.crossover:
            a, b = crossover(a, b, cfg, rng)
        out.append(mutate(a, cfg, rng).validate(cfg.bounds))
        if len(out) < cfg.population:
            out.append(mutate(b, cfg, rng).validate(cfg.bounds))
    return out


def random_genome(genotype: Genotype, bounds: Bounds, rng: np.random.Generator) -> NetworkGenome:
    ints = [int(rng.integers(lo, hi + 1)) for lo, hi in (getattr(bounds, n) for n in Bounds.INTEGER)]
    reals = [float(rng.uniform(lo, hi)) for lo, hi in (getattr(bounds, n) for n in Bounds.REAL)]
    return NetworkGenome(*ints, *reals, genotype)


# main loop ------------------------------------------------------------------------------

@dataclass
class EvoResult:
    front: list[Individual]
    population: list[Individual]
    history: list[list[tuple[float, int]]] = field(default_factory=list)  # objectives per generation
    evaluations: int = 0


def evaluate(genome: NetworkGenome, evaluator: Evaluator) -> Individual:
    ev = evaluator(genome)
    if not 0.0 <= ev.err <= 1.0:
        raise ValueError(f"evaluator returned err={ev.err} outside [0, 1]")
    return Individual(genome, float(ev.err), int(ev.params), ev.metrics, ev.diverged)


def unique_front(pop: list[Individual]) -> list[Individual]:
    """First front, one individual per macro vector, ordered by (params, err, macro)."""
    fronts = fast_nondominated_sort([p.objectives for p in pop])
    seen, out = set(), []
    for i in fronts[0] if fronts else []:
        key = pop[i].genome.macro
        if key not in seen:
            seen.add(key)
            out.append(pop[i])
    return sorted(out, key=lambda p: (p.params, p.err, p.genome.macro))


def evolve(cfg: EvoConfig, evaluator: Evaluator, genotype: Genotype,
           progress: Callable[[str], None] | None = None) -> EvoResult:
    rng = np.random.default_rng(cfg.seed)
    pop = [evaluate(random_genome(genotype, cfg.bounds, rng), evaluator) for _ in range(cfg.population)]
    evaluations = len(pop)
    assign_rank_and_crowding(pop)
    history = [[p.objectives for p in pop]]
    for gen in range(cfg.generations):
        children = [evaluate(g, evaluator) for g in make_offspring(pop, cfg, rng)]
        evaluations += len(children)
        pop = environmental_selection(pop + children, cfg.population)
        history.append([p.objectives for p in pop])
        if progress:
            best = min(p.err for p in pop)
            progress(f"generation {gen + 1}/{cfg.generations}: best err {best:.4f}, "
                     f"smallest {min(p.params for p in pop)} params")
    return EvoResult(unique_front(pop), pop, history, evaluations)


def hypervolume_2d(points, ref: tuple[float, float]) -> float:
    """Area dominated by ``points`` and bounded by ``ref`` (both objectives minimised)."""
    pts = sorted((float(x), float(y)) for x, y in points if x < ref[0] and y < ref[1])
    stair, best_y = [], ref[1]
    for x, y in pts:
        if y < best_y:
            stair.append((x, y))
            best_y = y
    area = 0.0
    for k, (x, y) in enumerate(stair):
        x_next = stair[k + 1][0] if k + 1 < len(stair) else ref[0]
        area += (x_next - x) * (ref[1] - y)
    return area


# decision ------------------------------------------------------------------------------

class DegenerateFrontError(ValueError):
    """The chord between the complexity extremes is undefined."""


@dataclass(frozen=True)
class DecisionLine:
    A: float
    B: float
    anchor_max: tuple[float, float]  # (params, err) at the largest network
    anchor_min: tuple[float, float]

    def signed_distance(self, x: float, y: float, denominator: str = "none") -> float:
        d = -(self.A * x + y + self.B) + 0.0  # no negative zero on the line
        if denominator == "sq":
            return d / (self.A ** 2 + 1)
        if denominator == "sqrt":
            return d / math.sqrt(self.A ** 2 + 1)
        if denominator != "none":
            raise ValueError(f"unknown denominator {denominator!r}")
        return d


@dataclass(frozen=True)
class Decision:
    index: int
    line: DecisionLine
    distances: tuple[float, ...]


def decision_line(points) -> DecisionLine:
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise DegenerateFrontError(f"decision needs at least 2 individuals, got {len(pts)}")
    xs = [p[0] for p in pts]
    if max(xs) == min(xs):
        raise DegenerateFrontError("all individuals have the same parameter count; the chord is undefined")
    i0 = min(range(len(pts)), key=lambda i: (-pts[i][0], pts[i][1], i))
    i1 = min(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1], i))
    (x0, y0), (x1, y1) = pts[i0], pts[i1]
    m = (y0 - y1) / (x0 - x1)
    return DecisionLine(-m, m * x0 - y0, (x0, y0), (x1, y1))


def decide(points, denominator: str = "none") -> Decision:
    """Knee point: the member farthest below the chord joining the complexity extremes.

    ``points`` are (params, err) pairs. Ties go to fewer parameters, then lower index.
    """
    pts = [(float(x), float(y)) for x, y in points]
    line = decision_line(pts)
    dist = tuple(line.signed_distance(x, y, denominator) for x, y in pts)
    best = min(range(len(pts)), key=lambda i: (-dist[i], pts[i][0], i))
    return Decision(best, line, dist)


def decide_front(front: Sequence[Individual], denominator: str = "none") -> Decision:
    return decide([(p.params, p.err) for p in front], denominator)


# artifacts -------------------------------------------------------------------------------

def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def pareto_rows(front: Sequence[Individual]) -> list[dict]:
    rows = []
    for p in front:
        g = p.genome
        m = p.metrics
        rows.append({"v0": g.v0, "v1": g.v1, "v2": g.v2, "v3": g.v3, "v4": float(g.v4), "v5": float(g.v5),
                     "params": int(p.params), "err_pct": 100.0 * float(p.err),
                     "flops": None if m is None else int(m.flops),
                     "latency_ms": None if m is None else m.latency_ms,
                     "depth": depth(g)})
    return rows


def pareto_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PARETO_COLUMNS)
    for r in rows:
        w.writerow([_num(r[c]) for c in PARETO_COLUMNS])
    return buf.getvalue()


def read_pareto_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != PARETO_COLUMNS:
        raise ValueError(f"pareto CSV header must be {','.join(PARETO_COLUMNS)}, got {reader.fieldnames}")
    rows = []
    for n, raw in enumerate(reader, start=2):
        try:
            row = {c: (None if raw[c] == "" else float(raw[c])) for c in PARETO_COLUMNS}
        except ValueError as exc:
            raise ValueError(f"pareto CSV line {n}: {exc}") from None
        for c in ("params", "err_pct"):
            if row[c] is None:
                raise ValueError(f"pareto CSV line {n}: column {c} is empty")
        for c in ("v0", "v1", "v2", "v3", "params", "flops", "depth"):
            if row[c] is not None:
                row[c] = int(row[c])
        rows.append(row)
    return rows
