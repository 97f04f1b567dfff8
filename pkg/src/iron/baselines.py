"""Derivative-free baselines: simulated annealing, GA, compass pattern search, PSO.

All four maximize ``score_fn`` over an axis-aligned box, count every call to
it, and keep every queried point inside the box.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteScoreError


@dataclass(frozen=True)
class SearchBox:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("box bounds must be 1-D and of equal length")
        if not np.all(hi > lo):
            raise ConfigError(f"box needs upper > lower on every axis, got {lo} / {hi}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    @classmethod
    def from_grid(cls, grid) -> SearchBox:
        return cls(tuple(grid.lower), tuple(grid.upper))


@dataclass(frozen=True)
class OptResult:
    best_params: np.ndarray
    best_score: float
    evaluation_count: int
    runtime_seconds: float


@dataclass(frozen=True)
class AnnealConfig:
    initial_temperature: float = 1.0  # relative to |score at the start point|
    cooling_rate: float = 0.95
    proposal_scale: float = 0.1  # fraction of the box extent
    max_iterations: int = 4000
    iterations_per_temperature: int = 10
    seed: int = 0

    def __post_init__(self):
        _check_counts(self, "max_iterations", "iterations_per_temperature")
        if not self.initial_temperature > 0:
            raise ConfigError("initial_temperature must be > 0")
        if not 0 < self.cooling_rate < 1:
            raise ConfigError("cooling_rate must lie in (0, 1)")
        if not 0 < self.proposal_scale <= 1:
            raise ConfigError("proposal_scale must lie in (0, 1]")


@dataclass(frozen=True)
class GAConfig:
    population: int = 80
    generations: int = 100
    crossover_rate: float = 0.8
    mutation_rate: float = 0.2
    elite_count: int = 2
    tournament_size: int = 3
    blend_alpha: float = 0.5
    mutation_scale: float = 0.1  # fraction of the box extent, shrinks linearly to 0
    seed: int = 0

    def __post_init__(self):
        _check_counts(self, "population", "generations", "elite_count", "tournament_size")
        _check_rates(self, "crossover_rate", "mutation_rate")
        if self.elite_count >= self.population:
            raise ConfigError("elite_count must be smaller than the population")


@dataclass(frozen=True)
class PatternConfig:
    initial_mesh: float = 0.1  # fraction of the mean box extent
    expansion: float = 2.0
    contraction: float = 0.5
    mesh_tolerance: float = 1e-3  # absolute, in parameter units
    max_evaluations: int = 20000
    seed: int = 0  # unused: compass search is deterministic given its start

    def __post_init__(self):
        _check_counts(self, "max_evaluations")
        if not self.initial_mesh > 0:
            raise ConfigError("initial_mesh must be > 0")
        if not self.mesh_tolerance > 0:
            raise ConfigError("mesh_tolerance must be > 0")
        if not self.expansion >= 1:
            raise ConfigError("expansion must be >= 1")
        if not 0 < self.contraction < 1:
            raise ConfigError("contraction must lie in (0, 1)")


@dataclass(frozen=True)
class PSOConfig:
    swarm_size: int = 60
    max_iterations: int = 100
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    seed: int = 0

    def __post_init__(self):
        _check_counts(self, "swarm_size", "max_iterations")
        if not (self.inertia >= 0 and self.cognitive >= 0 and self.social >= 0):
            raise ConfigError("PSO weights must be >= 0")


def _check_counts(cfg, *names):
    for name in names:
        v = getattr(cfg, name)
        if int(v) != v or v < 1:
            raise ConfigError(f"{name} must be an integer >= 1, got {v}")


def _check_rates(cfg, *names):
    for name in names:
        if not 0 <= getattr(cfg, name) <= 1:
            raise ConfigError(f"{name} must lie in [0, 1], got {getattr(cfg, name)}")


class _Counted:
    """Wraps the objective: counts calls, enforces the box, rejects non-finite scores."""

    def __init__(self, fn, box: SearchBox):
        self.fn = fn
        self.box = box
        self.count = 0
        self.best_x = None
        self.best = -np.inf

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        assert self.box.contains(x), x
        self.count += 1
        value = float(self.fn(x))
        if not np.isfinite(value):
            raise NonFiniteScoreError(x, value)
        if value > self.best:
            self.best, self.best_x = value, x.copy()
        return value

    def result(self, t0) -> OptResult:
        return OptResult(self.best_x, self.best, self.count, time.perf_counter() - t0)


def _start(box, x0, rng):
    if x0 is None:
        return rng.uniform(box.lo, box.hi)
    return box.clip(np.asarray(x0, dtype=np.float64))


def simulated_annealing(score_fn, box: SearchBox, cfg: AnnealConfig = AnnealConfig(), x0=None) -> OptResult:
    """Metropolis annealing with geometric cooling and Gaussian proposals.

    The temperature drops by ``cooling_rate`` every ``iterations_per_temperature``
    steps; proposals have standard deviation
    ``proposal_scale * extent * sqrt(T / T0)``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    f = _Counted(score_fn, box)
    x = _start(box, x0, rng)
    fx = f(x)
    temp0 = cfg.initial_temperature * max(abs(fx), 1e-12)
    for it in range(cfg.max_iterations - 1):
        ratio = cfg.cooling_rate ** (it // cfg.iterations_per_temperature)
        step = cfg.proposal_scale * box.extent * np.sqrt(ratio)
        cand = box.clip(x + rng.normal(0.0, 1.0, size=x.shape) * step)
        fc = f(cand)
        delta = fc - fx
        if delta >= 0 or rng.random() < np.exp(delta / (temp0 * ratio)):
            x, fx = cand, fc
    return f.result(t0)


def genetic_algorithm(score_fn, box: SearchBox, cfg: GAConfig = GAConfig(), x0=None) -> OptResult:
    """Generational GA: tournament selection, blend (BLX-alpha) crossover,
    Gaussian mutation with a linearly shrinking scale, elitism."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    f = _Counted(score_fn, box)
    dim = len(box.lower)
    pop = rng.uniform(box.lo, box.hi, size=(cfg.population, dim))
    if x0 is not None:
        pop[0] = box.clip(np.asarray(x0, dtype=np.float64))
    fit = np.array([f(p) for p in pop])

    def tournament():
        idx = rng.integers(0, cfg.population, size=cfg.tournament_size)
        return pop[idx[np.argmax(fit[idx])]]

    for gen in range(cfg.generations):
        order = np.argsort(-fit, kind="stable")
        children = [pop[i].copy() for i in order[:cfg.elite_count]]
        child_fit = [fit[i] for i in order[:cfg.elite_count]]
        scale = cfg.mutation_scale * box.extent * (1.0 - gen / cfg.generations)
        while len(children) < cfg.population:
            a, b = tournament(), tournament()
            if rng.random() < cfg.crossover_rate:
                lo, hi = np.minimum(a, b), np.maximum(a, b)
                span = hi - lo
                child = rng.uniform(lo - cfg.blend_alpha * span, hi + cfg.blend_alpha * span)
            else:
                child = a.copy()
            mutate = rng.random(dim) < cfg.mutation_rate
            child = child + mutate * rng.normal(0.0, 1.0, size=dim) * scale
            child = box.clip(child)
            children.append(child)
            child_fit.append(f(child))
        pop, fit = np.array(children), np.array(child_fit)
    return f.result(t0)


def pattern_search(score_fn, box: SearchBox, cfg: PatternConfig = PatternConfig(), x0=None) -> OptResult:
    """Compass search over the 2n coordinate directions.

    Polls ``+e1, -e1, +e2, ...`` at the current mesh size and moves to the first
    strictly better point, expanding the mesh; a fully failed poll contracts it.
    Stops once the mesh drops below ``mesh_tolerance`` or the evaluation budget
    is spent. Without ``x0`` the search starts at the box center.
    """
    t0 = time.perf_counter()
    f = _Counted(score_fn, box)
    x = box.clip(np.asarray(x0, dtype=np.float64)) if x0 is not None else (box.lo + box.hi) / 2
    fx = f(x)
    mesh = cfg.initial_mesh * float(np.mean(box.extent))
    dim = len(x)
    directions = [s * e for e in np.eye(dim) for s in (1.0, -1.0)]
    while mesh >= cfg.mesh_tolerance and f.count < cfg.max_evaluations:
        for d in directions:
            if f.count >= cfg.max_evaluations:
                break
            cand = box.clip(x + mesh * d)
            fc = f(cand)
            if fc > fx:
                x, fx = cand, fc
                mesh *= cfg.expansion
                break
        else:
            mesh *= cfg.contraction
    return OptResult(x.copy(), fx, f.count, time.perf_counter() - t0)


def particle_swarm(score_fn, box: SearchBox, cfg: PSOConfig = PSOConfig(), x0=None) -> OptResult:
    """Global-best PSO with constriction-style weights; particles that leave
    the box are clamped to it and lose the outward velocity component."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    f = _Counted(score_fn, box)
    dim = len(box.lower)
    x = rng.uniform(box.lo, box.hi, size=(cfg.swarm_size, dim))
    if x0 is not None:
        x[0] = box.clip(np.asarray(x0, dtype=np.float64))
    vel = rng.uniform(-1.0, 1.0, size=x.shape) * box.extent * 0.1
    fx = np.array([f(p) for p in x])
    pbest, pbest_f = x.copy(), fx.copy()
    g = int(np.argmax(pbest_f))
    for _ in range(cfg.max_iterations):
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        vel = cfg.inertia * vel + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (pbest[g] - x)
        x = x + vel
        clipped = box.clip(x)
        vel[clipped != x] = 0.0
        x = clipped
        fx = np.array([f(p) for p in x])
        better = fx > pbest_f
        pbest[better] = x[better]
        pbest_f[better] = fx[better]
        g = int(np.argmax(pbest_f))
    return f.result(t0)


METHODS = {
    "anneal": (simulated_annealing, AnnealConfig),
    "ga": (genetic_algorithm, GAConfig),
    "ps": (pattern_search, PatternConfig),
    "pso": (particle_swarm, PSOConfig),
}
