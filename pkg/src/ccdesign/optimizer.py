"""Univariate-normal EDA and a GA baseline with penalty fitness."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .rng import rng_stream

WORKERS_ENV = "CCDESIGN_WORKERS"
SIGMA_FLOOR_FRACTION = 1e-3


class OptimizerError(ValueError):
    pass


class Problem(Protocol):
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    cheap_objective: bool

    def objective(self, x: np.ndarray) -> float: ...

    def evaluate(self, x: np.ndarray) -> tuple[float, float]:
        """Return ``(objective, theta)``."""


@dataclass
class FunctionProblem:
    """Problem from plain callables; handy for surrogates and tests."""
    lower: np.ndarray
    upper: np.ndarray
    objective_fn: Callable
    theta_fn: Callable | None = None
    alpha: float = 1.0
    cheap_objective: bool = True

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    def objective(self, x):
        return float(self.objective_fn(x))

    def evaluate(self, x):
        theta = 1.0 if self.theta_fn is None else float(self.theta_fn(x))
        return self.objective(x), theta


@dataclass
class GaParams:
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1


@dataclass
class OptimizerParams:
    population_size: int = 100
    truncation_rate: float = 0.5
    max_iterations: int = 20
    penalty: float = 0.33
    select_generation: bool = False
    select_max_trials: int = 10_000
    seed: int = 0
    ga: GaParams = field(default_factory=GaParams)
    sigma_floor_fraction: float = SIGMA_FLOOR_FRACTION

    def __post_init__(self):
        if isinstance(self.ga, dict):
            self.ga = GaParams(**self.ga)
        if self.population_size < 2:
            raise OptimizerError("population_size must be >= 2")
        if not 0 < self.truncation_rate <= 1:
            raise OptimizerError("truncation_rate must be in (0, 1]")
        if self.max_iterations < 1:
            raise OptimizerError("max_iterations must be >= 1")
        if self.penalty < 0:
            raise OptimizerError("penalty must be >= 0")
        if self.select_max_trials < 0:
            raise OptimizerError("select_max_trials must be >= 0")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0 <= getattr(self.ga, name) <= 1:
                raise OptimizerError(f"ga.{name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    theta: float
    fitness: float
    feasible: bool

    def to_dict(self) -> dict:
        return {"x": [float(v) for v in self.x], "objective": self.objective, "theta": self.theta,
                "fitness": self.fitness, "feasible": self.feasible}


@dataclass
class UnivariateNormalModel:
    mu: np.ndarray
    var: np.ndarray
    sigma_floor: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass
class RunState:
    algorithm: str
    population: list
    model: UnivariateNormalModel | None = None
    best_feasible: Solution | None = None
    best_objective: float = math.inf
    log: list = field(default_factory=list)
    select_audit: list = field(default_factory=list)
    evaluations: int = 0


def fitness(objective: float, theta: float, alpha: float, penalty: float) -> float:
    return objective + penalty * max(0.0, alpha - theta)


def make_solution(x, objective, theta, problem: Problem, penalty: float) -> Solution:
    return Solution(np.asarray(x, dtype=float), float(objective), float(theta),
                    fitness(objective, theta, problem.alpha, penalty), bool(theta >= problem.alpha))


class Evaluator:
    """Evaluates candidates, caching by the exact bits of ``x``.

    With ``workers > 1`` uncached candidates are mapped over a process pool;
    results come back in submission order so runs are identical for any
    worker count.
    """

    def __init__(self, problem: Problem, penalty: float, workers: int | None = None):
        self.problem = problem
        self.penalty = penalty
        self.workers = default_workers() if workers is None else max(1, int(workers))
        self.cache: dict[bytes, tuple[float, float]] = {}
        self.calls = 0
        self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def objective(self, x) -> float:
        """Objective only; used by select generation on cheap problems."""
        key = np.asarray(x, dtype=float).tobytes()
        if key in self.cache:
            return self.cache[key][0]
        return self.problem.objective(x)

    def __call__(self, xs) -> list[Solution]:
        xs = [np.asarray(x, dtype=float) for x in xs]
        keys = [x.tobytes() for x in xs]
        todo = {}
        for k, x in zip(keys, xs):
            if k not in self.cache and k not in todo:
                todo[k] = x
        if todo:
            if self.workers > 1 and len(todo) > 1:
                if self._pool is None:
                    self._pool = ProcessPoolExecutor(self.workers)
                results = list(self._pool.map(self.problem.evaluate, todo.values()))
            else:
                results = [self.problem.evaluate(x) for x in todo.values()]
            self.calls += len(results)
            self.cache.update(zip(todo.keys(), results))
        return [make_solution(x, *self.cache[k], self.problem, self.penalty) for k, x in zip(keys, xs)]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def evaluate(x, problem: Problem, penalty: float = 0.33) -> Solution:
    x = np.asarray(x, dtype=float)
    if np.any(x < problem.lower) or np.any(x > problem.upper):
        raise OptimizerError("x outside the design bounds")
    return make_solution(x, *problem.evaluate(x), problem, penalty)


def init_population(lower, upper, n: int, seed: int) -> np.ndarray:
    """Uniform initial population; depends only on ``seed`` (shared by all algorithms)."""
    if n <= 0:
        raise OptimizerError("population size must be > 0")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    u = rng_stream(seed, "init").random((n, lower.size))
    return np.clip(lower + u * (upper - lower), lower, upper)


def truncation_select(population: list, rate: float) -> list:
    if not 0 < rate <= 1:
        raise OptimizerError("truncation rate must be in (0, 1]")
    k = int(math.floor(rate * len(population) + 1e-9))
    if k < 1:
        raise OptimizerError(f"truncation rate {rate} selects nothing from {len(population)} solutions")
    order = sorted(range(len(population)),
                   key=lambda i: (population[i].fitness, population[i].objective, i))
    return [population[i] for i in order[:k]]


def fit_model(selected: list, lower, upper, floor_fraction: float = SIGMA_FLOOR_FRACTION) -> UnivariateNormalModel:
    if len(selected) < 2:
        raise OptimizerError("need at least 2 selected solutions to fit the model")
    x = np.array([s.x for s in selected])
    floor = floor_fraction * (np.asarray(upper, float) - np.asarray(lower, float))
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), floor ** 2)
    return UnivariateNormalModel(mu, var, floor)


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = rng.random(m)
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 is in (0, 1]
    z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
    return z[:n].reshape(shape)


def sample_model(model: UnivariateNormalModel, lower, upper, rng: np.random.Generator, n: int = 1,
                 clip: bool = True) -> np.ndarray:
    x = model.mu + model.sigma * box_muller(rng, (n, model.mu.size))
    return np.clip(x, lower, upper) if clip else x


def select_generation(model: UnivariateNormalModel, lower, upper, f_best: float, n: int, max_trials: int,
                      objective: Callable, rng: np.random.Generator, audit: list | None = None,
                      iteration: int = 0) -> np.ndarray:
    """Sample ``n`` candidates, keeping draws with ``objective(x) < f_best``.

    After ``max_trials`` draws the remaining slots are filled without the
    filter. ``f_best = inf`` makes the filter vacuous.
    """
    out = []
    trials = 0
    while len(out) < n and trials < max_trials:
        x = sample_model(model, lower, upper, rng)[0]
        trials += 1
        f = objective(x)
        ok = f < f_best
        if audit is not None:
            audit.append((iteration, trials, float(f), float(f_best), bool(ok)))
        if ok:
            out.append(x)
    if len(out) < n:
        out.extend(sample_model(model, lower, upper, rng, n - len(out)))
    return np.array(out)


def ga_step(population: list, params: OptimizerParams, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Generational GA: truncation parents, uniform crossover, uniform-reset mutation."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    parents = np.array([s.x for s in truncation_select(population, params.truncation_rate)])
    n, d = params.population_size, lower.size
    children = np.empty((n, d))
    for c in range(0, n, 2):
        a, b = parents[rng.integers(len(parents), size=2)]
        if rng.random() < params.ga.crossover_rate:
            swap = rng.random(d) < 0.5
            a, b = np.where(swap, b, a), np.where(swap, a, b)
        children[c] = a
        if c + 1 < n:
            children[c + 1] = b
    mutate = rng.random((n, d)) < params.ga.mutation_rate
    fresh = lower + rng.random((n, d)) * (upper - lower)
    children = np.where(mutate, fresh, children)
    return np.clip(children, lower, upper)


LOG_FIELDS = ["iteration", "evaluations", "best_feasible_objective", "best_fitness", "mean_theta",
              "feasible_count"]


def _log_row(state: RunState, it: int, population: list) -> dict:
    row = {
        "iteration": it,
        "evaluations": state.evaluations,
        "best_feasible_objective": state.best_objective,
        "best_fitness": min(s.fitness for s in population),
        "mean_theta": float(np.mean([s.theta for s in population])),
        "feasible_count": sum(s.feasible for s in population),
    }
    if state.model is not None:
        for i, (m, s) in enumerate(zip(state.model.mu, state.model.sigma)):
            row[f"mu_{i}"] = float(m)
            row[f"sigma_{i}"] = float(s)
    return row


def run(problem: Problem, params: OptimizerParams, algorithm: str = "eda", workers: int | None = None,
        progress: Callable | None = None) -> RunState:
    """Run ``max_iterations`` generations; each one evaluates a full population."""
    if algorithm not in ("eda", "ga"):
        raise OptimizerError(f"unknown algorithm {algorithm!r}")
    if params.select_generation and not problem.cheap_objective:
        raise OptimizerError("select generation needs a cheap objective")
    lower, upper = problem.lower, problem.upper
    xs = init_population(lower, upper, params.population_size, params.seed)
    state = RunState(algorithm, [])
    with Evaluator(problem, params.penalty, workers) as ev:
        for it in range(params.max_iterations):
            population = ev(xs)
            state.population = population
            state.evaluations += len(population)
            for s in population:
                if s.feasible and (state.best_feasible is None or s.objective < state.best_objective):
                    state.best_feasible = s
                    state.best_objective = s.objective
            if algorithm == "eda":
                state.model = fit_model(truncation_select(population, params.truncation_rate), lower, upper,
                                        params.sigma_floor_fraction)
            state.log.append(_log_row(state, it, population))
            if progress is not None:
                progress(state.log[-1])
            if it == params.max_iterations - 1:
                break
            rng = rng_stream(params.seed, algorithm, it)
            if algorithm == "eda":
                if params.select_generation:
                    xs = select_generation(state.model, lower, upper, state.best_objective,
                                           params.population_size, params.select_max_trials, ev.objective,
                                           rng, state.select_audit, it)
                else:
                    xs = sample_model(state.model, lower, upper, rng, params.population_size)
            else:
                xs = ga_step(population, params, lower, upper, rng)
                if params.select_generation:
                    xs = _ga_select(xs, population, params, lower, upper, state, ev, rng, it)
    return state


def _ga_select(xs, population, params, lower, upper, state, ev, rng, it):
    """GA variant of select generation: keep regenerating offspring until they beat f_best."""
    if not math.isfinite(state.best_objective):
        return xs
    out = []
    trials = 0
    pool = list(xs)
    while len(out) < params.population_size and trials < params.select_max_trials:
        if not pool:
            pool = list(ga_step(population, params, lower, upper, rng))
        x = pool.pop(0)
        trials += 1
        f = ev.objective(x)
        ok = f < state.best_objective
        state.select_audit.append((it, trials, float(f), float(state.best_objective), bool(ok)))
        if ok:
            out.append(x)
    if len(out) < params.population_size:
        fill = list(pool) + list(ga_step(population, params, lower, upper, rng))
        out.extend(fill[: params.population_size - len(out)])
    return np.array(out)
