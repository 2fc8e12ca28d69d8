import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egdarts.data import SplitSpec, split, synth_dataset
from egdarts.evo import (
    DegenerateFrontError,
    EvoConfig,
    Individual,
    SurrogateEvaluator,
    TrainedEvaluator,
    crowding_distance,
    decide,
    decision_line,
    dominates,
    environmental_selection,
    evolve,
    fast_nondominated_sort,
    genome_seed,
    hypervolume_2d,
    integer_mutation,
    make_offspring,
    pareto_csv,
    pareto_rows,
    polynomial_mutation,
    read_pareto_csv,
    sbx_pair,
    structure_key,
    assign_rank_and_crowding,
)
from egdarts.network import TABLE_I_BOUNDS, Bounds, NetworkGenome
from egdarts.search_space import Genotype
from oracles import SAMPLE_NORMAL, SAMPLE_REDUCE, brute_fronts, knee_by_geometry

GENOTYPE = Genotype(SAMPLE_NORMAL, SAMPLE_REDUCE)
SMALL_BOUNDS = Bounds.from_json({"v0": [8, 12], "v1": [1, 2], "v2": [1, 2], "v3": [1, 2],
                                 "v4": [1.0, 1.5], "v5": [1.0, 1.5]})


# sorting and crowding --------------------------------------------------------------------

def test_sort_example():
    assert fast_nondominated_sort([(1, 2), (2, 1), (2, 2)]) == [[0, 1], [2]]


def test_duplicates_share_a_front():
    assert fast_nondominated_sort([(1, 1), (1, 1), (2, 2)]) == [[0, 1], [2]]


@pytest.mark.parametrize("seed", range(100))
def test_sort_matches_brute_force_layers(seed):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 30, (200, 2)).tolist() if seed % 2 else rng.random((200, 2)).tolist()
    assert fast_nondominated_sort(pts) == brute_fronts(pts)


def test_crowding_boundaries_and_even_spacing():
    d = crowding_distance([(0, 2), (1, 1), (2, 0)])
    assert math.isinf(d[0]) and math.isinf(d[2])
    assert d[1] == 2.0
    assert np.all(np.isinf(crowding_distance([(0, 1), (1, 0)])))


def test_dominance():
    assert dominates((1, 1), (1, 2))
    assert not dominates((1, 1), (1, 1))
    assert not dominates((0, 2), (1, 1))


def _individuals(objs):
    return [Individual(NetworkGenome(8, 1, 1, 1, 1.0, 1.0, GENOTYPE), err=e, params=p) for e, p in objs]


def test_environmental_selection_keeps_whole_fronts_then_crowding():
    pop = _individuals([(0.1, 10), (0.2, 5), (0.3, 1), (0.15, 8), (0.5, 20), (0.6, 30)])
    chosen = environmental_selection(pop, 3)
    assert len(chosen) == 3
    # front 1 has four members, so its two extremes and the wider-gapped middle survive
    assert {(p.err, p.params) for p in chosen} == {(0.1, 10), (0.3, 1), (0.2, 5)}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 100)), min_size=2, max_size=40), st.integers(1, 40))
def test_selection_size_and_rank_order(objs, n):
    pop = _individuals(objs)
    n = min(n, len(pop))
    chosen = environmental_selection(pop, n)
    assert len(chosen) == n
    worst_kept = max(p.rank for p in chosen)
    assert all(p.rank >= worst_kept for p in pop if p not in chosen)


# variation operators ---------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.floats(1, 3), st.floats(1, 3), st.integers(0, 10_000))
def test_sbx_children_in_bounds_and_mean_preserving(p1, p2, seed):
    c1, c2 = sbx_pair(p1, p2, 0.0, 10.0, 15.0, np.random.default_rng(seed))
    assert 0 <= c1 <= 10 and 0 <= c2 <= 10
    assert c1 + c2 == pytest.approx(p1 + p2, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(1, 3), st.integers(0, 10_000))
def test_polynomial_mutation_in_bounds(x, seed):
    assert 1 <= polynomial_mutation(x, 1.0, 3.0, 20.0, np.random.default_rng(seed)) <= 3


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_integer_mutation_moves_by_one_within_bounds(x, seed):
    y = integer_mutation(x, 1, 6, np.random.default_rng(seed))
    assert abs(y - x) == 1 and 1 <= y <= 6
    assert integer_mutation(4, 4, 4, np.random.default_rng(seed)) == 4


def test_offspring_respect_bounds_and_population_size():
    rng = np.random.default_rng(0)
    cfg = EvoConfig(population=7, bounds=SMALL_BOUNDS, mutation=1.0)
    ev = SurrogateEvaluator(4, (16, 16))
    pop = evolve(EvoConfig(population=7, generations=0, bounds=SMALL_BOUNDS), ev, GENOTYPE).population
    kids = make_offspring(pop, cfg, rng)
    assert len(kids) == 7
    for g in kids:
        g.validate(SMALL_BOUNDS)


# evolution -------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_population_size_and_elitism_on_surrogate(seed):
    cfg = EvoConfig(population=10, generations=8, seed=seed)
    res = evolve(cfg, SurrogateEvaluator(), GENOTYPE)
    assert all(len(gen) == 10 for gen in res.history)
    best_err = [min(e for e, _ in gen) for gen in res.history]
    best_params = [min(p for _, p in gen) for gen in res.history]
    assert all(b <= a for a, b in zip(best_err, best_err[1:]))
    assert all(b <= a for a, b in zip(best_params, best_params[1:]))
    objs = [p.objectives for p in res.front]
    assert not any(dominates(a, b) for a in objs for b in objs)


def test_evolve_is_deterministic():
    cfg = EvoConfig(population=6, generations=3, seed=4)
    a = evolve(cfg, SurrogateEvaluator(kind="inverse"), GENOTYPE)
    b = evolve(cfg, SurrogateEvaluator(kind="inverse"), GENOTYPE)
    assert pareto_csv(pareto_rows(a.front)) == pareto_csv(pareto_rows(b.front))


def test_inverse_surrogate_front_has_decidable_knee():
    res = evolve(EvoConfig(population=12, generations=5, seed=1), SurrogateEvaluator(kind="inverse"), GENOTYPE)
    d = decide([(p.params, p.err) for p in res.front])
    assert 0 <= d.index < len(res.front)


def test_structure_key_and_seed_ignore_equivalent_reals():
    a = NetworkGenome(16, 1, 2, 3, 1.5, 2.0, GENOTYPE)
    b = NetworkGenome(16, 1, 2, 3, 1.52, 2.01, GENOTYPE)  # rounds to the same channel plan
    c = NetworkGenome(16, 1, 2, 3, 2.0, 2.0, GENOTYPE)
    assert structure_key(a) == structure_key(b) != structure_key(c)
    assert genome_seed(a, 0) == genome_seed(b, 0) != genome_seed(a, 1)


def test_trained_evaluator_caches_by_structure():
    ws, vs = split(synth_dataset(seed=0, n=48, classes=2, size=8), SplitSpec(0.5, 0))
    ev = TrainedEvaluator(ws, vs, epochs=1, seed=0, batch_size=8, bounds=SMALL_BOUNDS)
    g = NetworkGenome(8, 1, 1, 1, 1.0, 1.0, GENOTYPE)
    first = ev(g)
    assert ev(NetworkGenome(8, 1, 1, 1, 1.01, 1.0, GENOTYPE)) is first
    assert 0.0 <= first.err <= 1.0 and not first.diverged
    again = TrainedEvaluator(ws, vs, epochs=1, seed=0, batch_size=8, bounds=SMALL_BOUNDS)(g)
    assert again.err == first.err


# hypervolume ----------------------------------------------------------------------------

def test_hypervolume_examples():
    assert hypervolume_2d([(1, 2), (2, 1)], (3, 3)) == 3.0
    assert hypervolume_2d([(1, 1)], (2, 2)) == 1.0
    assert hypervolume_2d([(5, 5)], (2, 2)) == 0.0
    assert hypervolume_2d([(1, 2), (2, 1), (2, 2)], (3, 3)) == 3.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=12))
def test_hypervolume_matches_grid_count(points):
    grid = sum(1 for i in range(10) for j in range(10)
               if any(x <= i and y <= j for x, y in points))
    assert hypervolume_2d(points, (10, 10)) == grid


# decision -------------------------------------------------------------------------------

FRONT = [(1, 10), (9, 2), (2, 3), (5, 6)]


def test_knee_example():
    d = decide(FRONT)
    assert d.index == 2
    assert d.line.A == 1.0 and d.line.B == -11.0
    assert d.distances[0] == 0.0 and d.distances[1] == 0.0
    assert all(math.copysign(1.0, x) == 1.0 for x in d.distances[:2])


@pytest.mark.parametrize("denominator", ["none", "sq", "sqrt"])
@pytest.mark.parametrize("sx, sy", [(1, 1), (1e3, 1), (1, 1e-2), (7.5, 30)])
def test_knee_invariant_to_rescaling_and_denominator(denominator, sx, sy):
    pts = [(x * sx, y * sy) for x, y in FRONT]
    assert decide(pts, denominator).index == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1000), st.integers(0, 1000)), min_size=2, max_size=15, unique_by=lambda p: p[0]))
def test_knee_agrees_with_perpendicular_geometry(raw):
    objs = [(x, y) for x, y in raw]
    front_idx = fast_nondominated_sort([(y, x) for x, y in objs])[0]
    pts = [objs[i] for i in front_idx]
    if len(pts) < 2:
        return
    d = decide(pts, "sqrt")
    best = max(d.distances)
    ref = knee_by_geometry(pts)
    assert d.distances[ref] == pytest.approx(best, abs=1e-9)


def test_degenerate_fronts_raise():
    with pytest.raises(DegenerateFrontError):
        decide([(1, 0.5)])
    with pytest.raises(DegenerateFrontError):
        decision_line([(3, 0.5), (3, 0.2)])


# csv ------------------------------------------------------------------------------------

def test_pareto_csv_round_trip_and_header_check():
    res = evolve(EvoConfig(population=4, generations=1, bounds=SMALL_BOUNDS), SurrogateEvaluator(4, (16, 16)), GENOTYPE)
    rows = pareto_rows(res.front)
    text = pareto_csv(rows)
    assert read_pareto_csv(text) == rows
    with pytest.raises(ValueError, match="header"):
        read_pareto_csv("a,b\n1,2\n")
    with pytest.raises(ValueError, match="line 2"):
        read_pareto_csv(text.splitlines()[0] + "\n8,1,1,1,1.0,1.0,x,1.0,,,\n")


def test_default_config_matches_published_table():
    cfg = EvoConfig()
    assert (cfg.population, cfg.generations, cfg.crossover, cfg.mutation) == (15, 20, 0.9, 0.1)
    assert TABLE_I_BOUNDS.to_json() == {"v0": [8, 60], "v1": [1, 6], "v2": [1, 6], "v3": [1, 6],
                                        "v4": [1, 3], "v5": [1, 3]}
