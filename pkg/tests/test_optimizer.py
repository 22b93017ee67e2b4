import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccdesign import optimizer as opt
from ccdesign.optimizer import (FunctionProblem, OptimizerError, OptimizerParams, Solution, UnivariateNormalModel,
                                box_muller, fit_model, fitness, ga_step, init_population, sample_model,
                                select_generation, truncation_select)
from ccdesign.problems import PAPER_BOUNDS
from ccdesign.rng import rng_stream

LO = np.array([lo for lo, _ in PAPER_BOUNDS.values()])
HI = np.array([hi for _, hi in PAPER_BOUNDS.values()])


def sol(x, f, theta=1.0, alpha=0.95, penalty=0.33, i=None):
    return Solution(np.atleast_1d(np.asarray(x, float)), f, theta, fitness(f, theta, alpha, penalty),
                    theta >= alpha)


def test_fitness_examples():
    assert fitness(100, 1.0, 0.95, 0.33) == 100
    assert abs(fitness(100, 0.80, 0.95, 0.33) - 100.0495) < 1e-12
    assert fitness(100, 0.95, 0.95, 0.33) == 100


def test_init_population():
    a = init_population(LO, HI, 1000, 5)
    assert np.all(a >= LO) and np.all(a <= HI)
    assert np.array_equal(a, init_population(LO, HI, 1000, 5))
    big = init_population(LO, HI, 100_000, 1)
    assert np.all(np.abs(big.mean(axis=0) - (LO + HI) / 2) <= 0.01 * (LO + HI) / 2)
    with pytest.raises(OptimizerError):
        init_population(LO, HI, 0, 0)


def test_truncation_examples():
    pop = [sol([i], float(i % 7)) for i in range(100)]
    assert len(truncation_select(pop, 0.5)) == 50
    same = [sol([i], 1.0) for i in range(10)]
    assert [s.x[0] for s in truncation_select(same, 0.3)] == [0, 1, 2]
    full = truncation_select(pop, 1.0)
    assert len(full) == 100 and [s.fitness for s in full] == sorted(s.fitness for s in pop)
    with pytest.raises(OptimizerError):
        truncation_select(pop[:1], 0.5)


def test_truncation_ties_by_objective():
    # equal fitness: the lower objective wins
    a = Solution(np.zeros(1), 10.0, 0.0, 11.0, False)
    b = Solution(np.zeros(1), 11.0, 1.0, 11.0, True)
    assert truncation_select([b, a], 0.5)[0] is a


def test_fit_model_examples():
    m = fit_model([sol([v], 0) for v in (1, 2, 3)], [0], [10])
    assert m.mu[0] == 2 and abs(m.var[0] - 2 / 3) < 1e-12
    m = fit_model([sol([5.0, v], 0) for v in (1, 2)], [0, 0], [10, 10])
    assert m.var[0] == (1e-3 * 10) ** 2
    with pytest.raises(OptimizerError):
        fit_model([sol([1], 0)], [0], [1])


def test_fit_model_no_covariance():
    # perfectly correlated columns fit the same marginals as shuffled ones
    rng = np.random.default_rng(0)
    v = rng.normal(size=50)
    a = fit_model([sol([x, x], 0) for x in v], [-9, -9], [9, 9])
    b = fit_model([sol([x, y], 0) for x, y in zip(v, rng.permutation(v))], [-9, -9], [9, 9])
    assert np.allclose(a.mu, b.mu) and np.allclose(a.var, b.var)


def test_sample_clipped_and_floor():
    m = UnivariateNormalModel(np.array([29.0]), np.array([1e6]), np.array([0.026]))
    x = sample_model(m, [4.0], [30.0], rng_stream(0, "t"), 10_000)
    assert x.max() <= 30 and x.min() >= 4
    floor = np.array([0.026])
    m = UnivariateNormalModel(np.array([15.0]), floor ** 2, floor)
    x = sample_model(m, [4.0], [30.0], rng_stream(1, "t"), 10_000)
    assert np.all(np.abs(x - 15) <= 6 * floor)


def test_sample_unclipped_mean():
    m = UnivariateNormalModel(np.array([20.0, -3.0]), np.array([4.0, 1.0]), np.array([0.1, 0.1]))
    x = sample_model(m, [-1e9] * 2, [1e9] * 2, rng_stream(2, "t"), 100_000, clip=False)
    assert np.all(np.abs(x.mean(axis=0) - m.mu) <= 0.01 * np.abs(m.mu))


def test_box_muller_moments():
    z = box_muller(rng_stream(3, "t"), (200_001,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01 and z.shape == (200_001,)


def test_select_generation_predicate():
    lo, hi = np.zeros(2), np.full(2, 100.0)
    m = UnivariateNormalModel(np.array([50.0, 50.0]), np.array([100.0, 100.0]), np.array([0.1, 0.1]))
    audit = []
    out = select_generation(m, lo, hi, 100.0, 30, 10_000, np.sum, rng_stream(0, "s"), audit)
    assert np.all(out.sum(axis=1) < 100.0)
    assert all(acc == (f < fb) for _, _, f, fb, acc in audit)
    assert any(not acc for *_, acc in audit)


def test_select_generation_cap_fills():
    # almost nothing beats f_best: the cap is hit and the rest is sampled freely
    lo, hi = np.zeros(1), np.full(1, 100.0)
    m = UnivariateNormalModel(np.array([50.0]), np.array([25.0]), np.array([0.1]))
    audit = []
    out = select_generation(m, lo, hi, 38.0, 100, 10_000, np.sum, rng_stream(0, "cap"), audit)
    accepted = sum(a for *_, a in audit)
    assert len(audit) == 10_000 and 0 < accepted < 100 and len(out) == 100
    assert np.all(out[:accepted, 0] < 38.0)


def test_select_generation_infinite_best_is_plain_sampling():
    m = UnivariateNormalModel(np.array([5.0]), np.array([1.0]), np.array([0.01]))
    a = select_generation(m, [0], [10], np.inf, 20, 100, np.sum, rng_stream(4, "x"))
    rng = rng_stream(4, "x")
    b = np.array([sample_model(m, [0], [10], rng)[0] for _ in range(20)])
    assert np.array_equal(a, b)


def test_ga_step_degenerate_cases():
    params = OptimizerParams(population_size=10, ga={"crossover_rate": 0.9, "mutation_rate": 0.0})
    pop = [sol([3.0, 4.0], 7.0) for _ in range(10)]
    kids = ga_step(pop, params, [0, 0], [10, 10], rng_stream(0, "g"))
    assert np.all(kids == [3.0, 4.0])
    params = OptimizerParams(population_size=10, ga={"crossover_rate": 0.0, "mutation_rate": 0.0})
    pop = [sol([float(i), float(i)], float(i)) for i in range(10)]
    kids = ga_step(pop, params, [0, 0], [10, 10], rng_stream(1, "g"))
    assert np.all(kids[:, 0] == kids[:, 1]) and np.all(kids[:, 0] < 5)


def test_ga_offspring_in_bounds():
    params = OptimizerParams()
    pop = [sol(x, x.sum()) for x in init_population(LO, HI, 100, 0)]
    kids = ga_step(pop, params, LO, HI, rng_stream(2, "g"))
    assert kids.shape == (100, 7) and np.all(kids >= LO) and np.all(kids <= HI)


def test_params_validation():
    for bad in (dict(truncation_rate=0), dict(truncation_rate=1.5), dict(population_size=1),
                dict(ga={"crossover_rate": 2.0, "mutation_rate": 0.1}), dict(max_iterations=0)):
        with pytest.raises(OptimizerError):
            OptimizerParams(**bad)


class Sphere:
    def __init__(self, c):
        self.c = np.asarray(c, float)

    def __call__(self, x):
        return float(np.sum((x - self.c) ** 2))


def sphere_problem(c):
    return FunctionProblem(np.full(len(c), -10.0), np.full(len(c), 10.0), Sphere(c))


def test_eda_sphere_surrogate():
    c = np.array([1.0, -2.0, 3.5, 0.25])
    state = opt.run(sphere_problem(c), OptimizerParams(seed=0), "eda", workers=1)
    assert state.best_objective < 1e-3
    assert len(state.log) == 20 and state.evaluations == 2000


def test_eda_constrained_surrogate():
    # feasible iff x_1 >= 10, f = sum(x); the optimum is x_1 = 10, others at their lower bound.
    # penalty 100 makes a unit shortfall in theta outweigh any length saving.
    prob = FunctionProblem(np.zeros(3), np.full(3, 20.0), np.sum, lambda x: float(x[0] >= 10), alpha=1.0)
    state = opt.run(prob, OptimizerParams(seed=1, penalty=100.0, max_iterations=30), "eda", workers=1)
    x = state.best_feasible.x
    assert abs(x[0] - 10) < 0.1 and np.all(x[1:] < 0.1)


def test_best_objective_monotone_and_feasible():
    prob = FunctionProblem(np.zeros(3), np.full(3, 20.0), np.sum, lambda x: float(x[0] >= 10), alpha=1.0)
    for algo in ("eda", "ga"):
        state = opt.run(prob, OptimizerParams(seed=2, population_size=30, max_iterations=8), algo, workers=1)
        best = [r["best_feasible_objective"] for r in state.log]
        assert best == sorted(best, reverse=True)
        assert state.best_feasible.theta >= prob.alpha


def test_run_deterministic():
    p = OptimizerParams(seed=4, population_size=20, max_iterations=5)
    a = opt.run(sphere_problem(np.ones(3)), p, "eda", workers=1)
    b = opt.run(sphere_problem(np.ones(3)), p, "eda", workers=1)
    assert a.log == b.log


def test_select_generation_run_audit():
    prob = FunctionProblem(np.zeros(3), np.full(3, 20.0), np.sum, lambda x: float(x[0] >= 10), alpha=1.0)
    p = OptimizerParams(seed=3, population_size=20, max_iterations=6, select_generation=True, select_max_trials=500)
    for algo in ("eda", "ga"):
        state = opt.run(prob, p, algo, workers=1)
        assert state.select_audit
        assert all(acc == (f < fb) for _, _, f, fb, acc in state.select_audit)


def test_select_generation_needs_cheap_objective():
    prob = FunctionProblem(np.zeros(2), np.ones(2), np.sum, cheap_objective=False)
    with pytest.raises(OptimizerError):
        opt.run(prob, OptimizerParams(select_generation=True), "eda", workers=1)


def test_degenerates_to_random_search():
    # truncation 1.0 keeps everyone, so the objective cannot steer the search:
    # minimizing x and minimizing -x give the same populations
    p = OptimizerParams(seed=0, population_size=400, truncation_rate=1.0, max_iterations=4, sigma_floor_fraction=0.5)
    up = opt.run(FunctionProblem(np.zeros(1), np.ones(1), np.sum), p, "eda", workers=1)
    down = opt.run(FunctionProblem(np.zeros(1), np.ones(1), lambda x: -float(np.sum(x))), p, "eda", workers=1)
    xu = np.sort([s.x[0] for s in up.population])
    xd = np.sort([s.x[0] for s in down.population])
    assert np.allclose(xu, xd, atol=1e-9)
    assert abs(np.mean(xu) - 0.5) < 0.05


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-1e3, 1e3, allow_nan=False), seed=st.integers(0, 1000))
def test_ranking_invariant_to_constant(shift, seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0, 100, 20)
    th = rng.uniform(0.5, 1.0, 20)
    a = [sol([i], f[i], th[i]) for i in range(20)]
    b = [sol([i], f[i] + shift, th[i]) for i in range(20)]
    assert [s.x[0] for s in truncation_select(a, 0.5)] == [s.x[0] for s in truncation_select(b, 0.5)]


def test_worker_count_does_not_change_log():
    p = OptimizerParams(seed=5, population_size=12, max_iterations=3)
    a = opt.run(sphere_problem(np.ones(2)), p, "ga", workers=1)
    b = opt.run(sphere_problem(np.ones(2)), p, "ga", workers=2)
    assert a.log == b.log


def test_algorithms_share_initial_population():
    p = OptimizerParams(seed=6, population_size=16, max_iterations=2)
    eda = opt.run(sphere_problem(np.ones(3)), p, "eda", workers=1)
    ga = opt.run(sphere_problem(np.ones(3)), p, "ga", workers=1)
    assert all(eda.log[0][k] == ga.log[0][k] for k in opt.LOG_FIELDS)
