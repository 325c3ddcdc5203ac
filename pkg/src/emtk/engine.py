"""Population container, variation operators and the generational engine.

One multifactorial engine drives both the single-task baseline (CEA) and the
implicit multitask algorithm (MFEA): CEA is exactly the K=1 case, which makes
the reduction law between the two hold by construction.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence

import numpy as np

from .problems import MultitaskProblem, TaskDefinition, assemble_mto, evaluate


class EngineError(ValueError):
    """Invalid engine configuration or population state."""


@dataclass
class EvolverConfig:
    """Knobs of one evolutionary run.

    ``mutation_rate`` of None means the usual 1/D default, resolved once the
    genome length is known. ``max_evaluations`` optionally caps the per-task
    evaluation budget; a generation in progress is always finished.
    """

    pop_size: int = 100
    generations: int = 100
    sbx_eta: float = 10.0
    mutation_rate: Optional[float] = None
    mutation_sigma: float = 0.05
    elitism: int = 1
    seed: int = 0
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        if self.pop_size <= 0 or self.pop_size % 2 != 0:
            raise EngineError("pop_size must be a positive even integer")
        if self.generations <= 0:
            raise EngineError("generations must be positive")
        if self.sbx_eta <= 0:
            raise EngineError("sbx_eta must be positive")
        if self.mutation_rate is not None and not (0.0 <= self.mutation_rate <= 1.0):
            raise EngineError("mutation_rate must lie in [0,1]")
        if self.mutation_sigma < 0:
            raise EngineError("mutation_sigma must be nonnegative")
        if not (0 <= self.elitism < self.pop_size):
            raise EngineError("elitism must satisfy 0 <= elitism < pop_size")

    def resolved_mutation_rate(self, dim: int) -> float:
        return 1.0 / dim if self.mutation_rate is None else self.mutation_rate

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "EvolverConfig":
        return cls(**json.loads(text))


@dataclass
class UnifiedIndividual:
    """A point in [0,1]^D with its multifactorial bookkeeping."""

    genome: np.ndarray
    skill_factor: int
    fitness: Optional[float] = None
    factorial_rank: Optional[int] = None
    scalar_fitness: Optional[float] = None


@dataclass
class Population:
    """Array-backed population; ``fitness[i]`` is on member i's skill task."""

    genomes: np.ndarray       # (n, D)
    skill_factor: np.ndarray  # (n,), int
    fitness: np.ndarray       # (n,)
    generation: int = 0

    @property
    def size(self) -> int:
        return self.genomes.shape[0]

    @property
    def dim(self) -> int:
        return self.genomes.shape[1]

    def members(self) -> List[UnifiedIndividual]:
        return [
            UnifiedIndividual(self.genomes[i].copy(), int(self.skill_factor[i]),
                              float(self.fitness[i]))
            for i in range(self.size)
        ]


@dataclass
class RunResult:
    """Per-task convergence record of one seeded run."""

    best_fitness_trace: List[np.ndarray]   # per task, length generations+1
    best_solution: List[np.ndarray]        # per task, unified genome
    evaluations_used: np.ndarray           # per task
    seed: int
    evaluations_trace: List[np.ndarray] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "task_id", "best_fitness", "evaluations"])
            for task_id, trace in enumerate(self.best_fitness_trace):
                evals = self.evaluations_trace[task_id]
                for gen, best in enumerate(trace):
                    writer.writerow([gen, task_id, repr(float(best)), int(evals[gen])])


def init_population(n: int, dim: int, rng: np.random.Generator) -> Population:
    """Uniform random population in [0,1]^dim; n must be even and positive."""
    if n <= 0 or n % 2 != 0:
        raise EngineError("population size must be a positive even integer")
    if dim < 1:
        raise EngineError("dimension must be at least 1")
    genomes = rng.random((n, dim))
    return Population(
        genomes=genomes,
        skill_factor=np.zeros(n, dtype=int),
        fitness=np.full(n, -np.inf),
    )


def sbx_crossover(p1: np.ndarray, p2: np.ndarray, eta: float, rng: np.random.Generator):
    """Simulated binary crossover on [0,1] genomes; children are clamped."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise EngineError("parent genome length mismatch")
    u = rng.random(p1.shape)
    beta = np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)),
        (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0)),
    )
    c1 = 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)
    c2 = 0.5 * ((1.0 - beta) * p1 + (1.0 + beta) * p2)
    return np.clip(c1, 0.0, 1.0), np.clip(c2, 0.0, 1.0)


def gaussian_mutation(u: np.ndarray, sigma: float, rate: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-coordinate Gaussian perturbation with probability ``rate``."""
    u = np.asarray(u, dtype=float)
    mask = rng.random(u.shape) < rate
    noise = rng.normal(0.0, 1.0, size=u.shape)
    out = np.where(mask, u + sigma * noise, u)
    return np.clip(out, 0.0, 1.0)


def factorial_ranks(population: Population, task_id: int) -> np.ndarray:
    """Ranks 1..m over members evaluated on ``task_id`` (1 = best).

    Ties break toward the lower member index; members not evaluated on the
    task receive rank m+1.
    """
    n = population.size
    evaluated = np.flatnonzero(population.skill_factor == task_id)
    m = evaluated.size
    ranks = np.full(n, m + 1, dtype=int)
    if m:
        # stable sort on descending fitness keeps lower indices first on ties
        order = evaluated[np.argsort(-population.fitness[evaluated], kind="stable")]
        ranks[order] = np.arange(1, m + 1)
    return ranks


def assortative_mating(parent_a: UnifiedIndividual, parent_b: UnifiedIndividual,
                       rmp: float, rng: np.random.Generator, *,
                       eta: float = 10.0, mutation_rate: float = 0.1,
                       mutation_sigma: float = 0.05):
    """Produce two offspring with skill factors per the rmp gate.

    Same skill: SBX then mutation, children inherit the shared skill.
    Different skills: with probability ``rmp`` SBX then mutation, each child
    drawing its skill uniformly from the two parents; otherwise each parent
    is mutated alone and the child keeps its parent's skill.

    Returns (child_a, child_b, crossed) with ``crossed`` flagging whether an
    inter-skill crossover event happened.
    """
    sa, sb = parent_a.skill_factor, parent_b.skill_factor
    if sa == sb:
        c1, c2 = sbx_crossover(parent_a.genome, parent_b.genome, eta, rng)
        c1 = gaussian_mutation(c1, mutation_sigma, mutation_rate, rng)
        c2 = gaussian_mutation(c2, mutation_sigma, mutation_rate, rng)
        return UnifiedIndividual(c1, sa), UnifiedIndividual(c2, sb), False
    if rng.random() < rmp:
        c1, c2 = sbx_crossover(parent_a.genome, parent_b.genome, eta, rng)
        c1 = gaussian_mutation(c1, mutation_sigma, mutation_rate, rng)
        c2 = gaussian_mutation(c2, mutation_sigma, mutation_rate, rng)
        s1 = sa if rng.random() < 0.5 else sb
        s2 = sa if rng.random() < 0.5 else sb
        return UnifiedIndividual(c1, s1), UnifiedIndividual(c2, s2), True
    c1 = gaussian_mutation(parent_a.genome, mutation_sigma, mutation_rate, rng)
    c2 = gaussian_mutation(parent_b.genome, mutation_sigma, mutation_rate, rng)
    return UnifiedIndividual(c1, sa), UnifiedIndividual(c2, sb), False


class MultifactorialEvolver:
    """Stateful generational loop shared by CEA (K=1) and MFEA (K>=1).

    One call to :meth:`step` advances a single generation. The explicit
    island engine drives K independent K=1 instances of this class and
    splices migrants into their populations between steps.
    """

    def __init__(self, problem: MultitaskProblem, config: EvolverConfig,
                 rmp: float, rng: np.random.Generator):
        if not (0.0 <= rmp <= 1.0):
            raise EngineError("rmp must lie in [0,1]")
        self.problem = problem
        self.config = config
        self.rmp = rmp
        self.rng = rng
        self.K = problem.num_tasks
        self.D = problem.unified_dim
        self.mut_rate = config.resolved_mutation_rate(self.D)
        self.inter_skill_crossovers = 0
        self.evals_per_task = np.zeros(self.K, dtype=int)

        self.pop = init_population(config.pop_size, self.D, rng)
        self.pop.skill_factor = np.arange(config.pop_size, dtype=int) % self.K
        for i in range(config.pop_size):
            self._evaluate_member(i)

        self.best_fitness = np.full(self.K, -np.inf)
        self.best_solution = [None] * self.K
        self._update_bests()
        self.trace = [self.best_fitness.copy()]
        self.evals_trace = [self.evals_per_task.copy()]

    def _evaluate_member(self, i: int) -> None:
        t = int(self.pop.skill_factor[i])
        self.pop.fitness[i] = evaluate(self.pop.genomes[i], self.problem.tasks[t])
        self.evals_per_task[t] += 1

    def _update_bests(self) -> None:
        for i in range(self.pop.size):
            t = int(self.pop.skill_factor[i])
            if self.pop.fitness[i] > self.best_fitness[t]:
                self.best_fitness[t] = self.pop.fitness[i]
                self.best_solution[t] = self.pop.genomes[i].copy()

    def _scalar_fitness(self) -> np.ndarray:
        own_rank = np.empty(self.pop.size, dtype=int)
        for t in range(self.K):
            ranks = factorial_ranks(self.pop, t)
            mine = self.pop.skill_factor == t
            own_rank[mine] = ranks[mine]
        return 1.0 / own_rank

    def _tournament(self, scalar: np.ndarray) -> int:
        i, j = self.rng.integers(0, self.pop.size, size=2)
        ki = (scalar[i], self.pop.fitness[i], -i)
        kj = (scalar[j], self.pop.fitness[j], -j)
        return int(i) if ki >= kj else int(j)

    def budget_exhausted(self) -> bool:
        cap = self.config.max_evaluations
        return cap is not None and bool(np.any(self.evals_per_task >= cap))

    def step(self) -> None:
        """Advance one generation (selection, variation, elitist survival)."""
        cfg = self.config
        scalar = self._scalar_fitness()
        n_off = cfg.pop_size - cfg.elitism

        children: List[UnifiedIndividual] = []
        while len(children) < n_off:
            a = self._tournament(scalar)
            b = self._tournament(scalar)
            pa = UnifiedIndividual(self.pop.genomes[a], int(self.pop.skill_factor[a]))
            pb = UnifiedIndividual(self.pop.genomes[b], int(self.pop.skill_factor[b]))
            ca, cb, crossed = assortative_mating(
                pa, pb, self.rmp, self.rng, eta=cfg.sbx_eta,
                mutation_rate=self.mut_rate, mutation_sigma=cfg.mutation_sigma,
            )
            if crossed:
                self.inter_skill_crossovers += 1
            children.append(ca)
            if len(children) < n_off:
                children.append(cb)

        # elite survivors by (scalar fitness, fitness, lower index)
        order = sorted(
            range(self.pop.size),
            key=lambda i: (-scalar[i], -self.pop.fitness[i], i),
        )
        elite_idx = order[: cfg.elitism]

        genomes = np.empty_like(self.pop.genomes)
        skills = np.empty(cfg.pop_size, dtype=int)
        fitness = np.empty(cfg.pop_size)
        for slot, i in enumerate(elite_idx):
            genomes[slot] = self.pop.genomes[i]
            skills[slot] = self.pop.skill_factor[i]
            fitness[slot] = self.pop.fitness[i]
        for slot, child in enumerate(children, start=cfg.elitism):
            genomes[slot] = child.genome
            skills[slot] = child.skill_factor
        self.pop = Population(genomes, skills, fitness, self.pop.generation + 1)
        for slot in range(cfg.elitism, cfg.pop_size):
            self._evaluate_member(slot)

        self._update_bests()

    def record(self) -> None:
        self.trace.append(self.best_fitness.copy())
        self.evals_trace.append(self.evals_per_task.copy())

    def run(self) -> None:
        for _ in range(self.config.generations):
            if self.budget_exhausted():
                break
            self.step()
            self.record()

    def result(self) -> RunResult:
        trace = np.array(self.trace)       # (G+1, K)
        evals = np.array(self.evals_trace)
        return RunResult(
            best_fitness_trace=[trace[:, t].copy() for t in range(self.K)],
            best_solution=[s.copy() for s in self.best_solution],
            evaluations_used=self.evals_per_task.copy(),
            seed=self.config.seed,
            evaluations_trace=[evals[:, t].copy() for t in range(self.K)],
        )


def run_cea(task: TaskDefinition, config: EvolverConfig,
            rng: Optional[np.random.Generator] = None) -> RunResult:
    """Single-task canonical EA baseline (the K=1 multifactorial loop)."""
    problem = assemble_mto([task])
    if rng is None:
        rng = np.random.default_rng(config.seed)
    engine = MultifactorialEvolver(problem, config, rmp=0.0, rng=rng)
    engine.run()
    return engine.result()


def task_rng(seed: int, task_id: int) -> np.random.Generator:
    """Per-task random stream, reproducible for island-model engines."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(task_id)]))
