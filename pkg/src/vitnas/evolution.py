"""Evolutionary subnet search under a parameter-count window.

Works against any fitness callable (arch -> score in [0, 1]); the usual one
evaluates inherited-weight accuracy on a validation split, but a surrogate
function slots in for search-dynamics tests. Fitness is memoized by
architecture key, so each distinct architecture is evaluated exactly once
per run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleConstraint, SpecError
from .metrics import Geometry, count_params
from .space import ArchConfig, SpaceSpec, crossover, mutate, sample_uniform
from .trainer import top1_accuracy


@dataclass
class SearchConfig:
    population_size: int = 50
    generations: int = 20
    num_parents: int = 10
    p_depth: float = 0.2
    p_gene: float = 0.4
    min_params: int = 1
    max_params: int | None = None  # None = unbounded above
    eval_samples: int = 0          # cap on validation images; 0 = use all
    seed: int = 0
    rejection_cap: int = 200       # resamples per constrained draw

    def __post_init__(self):
        if self.num_parents > self.population_size or self.num_parents < 1:
            raise SpecError("need 1 <= num_parents <= population_size")
        if self.min_params <= 0:
            raise SpecError("min_params must be positive")
        if self.max_params is not None and self.max_params < self.min_params:
            raise SpecError("max_params must be >= min_params")
        for p in (self.p_depth, self.p_gene):
            if not 0.0 <= p <= 1.0:
                raise SpecError(f"probability {p} outside [0, 1]")
        if self.rejection_cap < 1:
            raise SpecError("rejection_cap must be >= 1")

    KNOWN = ("population_size", "generations", "num_parents", "p_depth", "p_gene",
             "min_params", "max_params", "eval_samples", "seed", "rejection_cap")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.KNOWN)
        if unknown:
            raise SpecError(f"unknown search keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Candidate:
    arch: ArchConfig
    params: int
    fitness: float
    provenance: str   # seed | crossover | mutation | fresh
    generation: int

    def to_record(self):
        return {
            "arch": self.arch.key(),
            "params": self.params,
            "fitness": self.fitness,
            "provenance": self.provenance,
            "generation": self.generation,
        }


def evaluate(store, arch, images, labels, batch_size=256) -> float:
    """Top-1 accuracy with inherited weights; no gradient steps."""
    return top1_accuracy(store, arch, images, labels, batch_size)


def inherited_fitness(store, images, labels, batch_size=256, max_samples=0):
    """Fitness callable evaluating inherited-weight accuracy on a split."""
    if max_samples and max_samples < len(images):
        images = images[:max_samples]
        labels = labels[:max_samples]

    def fitness(arch):
        return evaluate(store, arch, images, labels, batch_size)

    return fitness


class _Run:
    """Shared machinery: memoized evaluation and constrained sampling."""

    def __init__(self, spec: SpaceSpec, geom: Geometry, cfg: SearchConfig, fitness):
        self.spec = spec
        self.geom = geom
        self.cfg = cfg
        self.fitness = fitness
        self.rng = np.random.default_rng(cfg.seed)
        self.memo = {}
        self.history = []

    def in_bounds(self, arch) -> int | None:
        p = count_params(arch, self.geom)
        lo, hi = self.cfg.min_params, self.cfg.max_params
        if p < lo or (hi is not None and p > hi):
            return None
        return p

    def constrained_uniform(self):
        for _ in range(self.cfg.rejection_cap):
            arch = sample_uniform(self.spec, self.rng)
            if self.in_bounds(arch) is not None:
                return arch
        return None

    def record(self, arch, generation, provenance) -> Candidate:
        key = arch.key()
        if key not in self.memo:
            self.memo[key] = float(self.fitness(arch))
        cand = Candidate(arch=arch, params=count_params(arch, self.geom),
                         fitness=self.memo[key], provenance=provenance,
                         generation=generation)
        self.history.append(cand)
        return cand

    def ranked_history(self):
        return sorted(self.history, key=lambda c: (c.generation, -c.fitness))


def evolve(spec: SpaceSpec, geom: Geometry, cfg: SearchConfig, fitness) -> list[Candidate]:
    """Generational search; returns every evaluated candidate, best-first
    within each generation.

    Generation 0 is constrained-uniform. Afterwards the top num_parents (by
    fitness, over everything evaluated so far) parent the next generation:
    offspring alternate crossover of two distinct parents with mutation of
    one, each rejection-resampled into the parameter window, falling back to
    a fresh constrained-uniform draw when the cap runs out.
    """
    run = _Run(spec, geom, cfg, fitness)
    seeds = []
    for _ in range(cfg.population_size):
        arch = run.constrained_uniform()
        if arch is None:
            if not seeds:
                raise InfeasibleConstraint(
                    f"no architecture inside params [{cfg.min_params}, {cfg.max_params}] "
                    f"after {cfg.rejection_cap * cfg.population_size} draws")
            arch = seeds[int(run.rng.integers(len(seeds)))].arch
        seeds.append(run.record(arch, 0, "seed"))

    for gen in range(1, cfg.generations + 1):
        parents = sorted(run.history, key=lambda c: -c.fitness)[:cfg.num_parents]
        for j in range(cfg.population_size):
            child, provenance = None, None
            for _ in range(cfg.rejection_cap):
                if j % 2 == 0 and len(parents) >= 2:
                    i1 = int(run.rng.integers(len(parents)))
                    i2 = (i1 + 1 + int(run.rng.integers(len(parents) - 1))) % len(parents)
                    cand = crossover(parents[i1].arch, parents[i2].arch, spec, run.rng)
                    prov = "crossover"
                else:
                    pick = parents[int(run.rng.integers(len(parents)))].arch
                    cand = mutate(pick, spec, cfg.p_depth, cfg.p_gene, run.rng)
                    prov = "mutation"
                if run.in_bounds(cand) is not None:
                    child, provenance = cand, prov
                    break
            if child is None:
                child = run.constrained_uniform()
                provenance = "fresh"
            if child is None:
                # feasible archs exist (generation 0 succeeded); reuse the best
                child, provenance = parents[0].arch, "fresh"
            run.record(child, gen, provenance)
    return run.ranked_history()


def random_search(spec: SpaceSpec, geom: Geometry, cfg: SearchConfig, fitness,
                  budget: int) -> list[Candidate]:
    """Constrained-uniform baseline at a fixed evaluation budget, ranked."""
    run = _Run(spec, geom, cfg, fitness)
    for _ in range(budget):
        arch = run.constrained_uniform()
        if arch is None:
            if not run.history:
                raise InfeasibleConstraint(
                    f"no architecture inside params [{cfg.min_params}, {cfg.max_params}] "
                    f"after {cfg.rejection_cap} draws")
            arch = run.history[int(run.rng.integers(len(run.history)))].arch
        run.record(arch, 0, "seed")
    return sorted(run.history, key=lambda c: -c.fitness)


def evolve_budget(cfg: SearchConfig) -> int:
    """Evaluation budget evolve consumes: matched by the random baseline."""
    return cfg.population_size * (cfg.generations + 1)


def best_candidate(history) -> Candidate:
    return max(history, key=lambda c: c.fitness)
