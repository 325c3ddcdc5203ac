"""Recipe wrappers: multi-fidelity, bilevel and multi-scenario as multitask.

Each wrapper is a pure construction that recasts its input as a
:class:`~emtk.problems.MultitaskProblem`, solvable by any engine in
:mod:`emtk.transfer`. The bilevel solver nests an upper-level EA over a
lower-level multitask run whose subpopulations are warm-started between
upper generations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .engine import (
    EvolverConfig,
    UnifiedIndividual,
    assortative_mating,
    init_population,
)
from .problems import (
    MultitaskProblem,
    ProblemError,
    TaskDefinition,
    assemble_mto,
    decode,
)
from .transfer import run_adaptive_emt


@dataclass
class FidelityStack:
    """A high-fidelity target plus cheaper low-fidelity versions of it."""

    high: TaskDefinition
    lows: Sequence[TaskDefinition]
    cost_ratio: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.cost_ratio <= 1.0):
            raise ProblemError("cost_ratio must lie in (0, 1]")
        for t in self.lows:
            if t.dim != self.high.dim or \
                    not np.allclose(t.lower, self.high.lower) or \
                    not np.allclose(t.upper, self.high.upper):
                raise ProblemError("all fidelities must share one search space")

    def descriptor(self) -> str:
        return json.dumps({
            "kind": "multifidelity",
            "dim": self.high.dim,
            "n_low": len(self.lows),
            "cost_ratio": self.cost_ratio,
        })


def build_multifidelity(stack: FidelityStack) -> MultitaskProblem:
    """Multitask problem with the high-fidelity task last (index K-1).

    Low-fidelity tasks carry ``cost_weight = cost_ratio`` so that
    ``problem.weighted_cost()`` reports budgets in high-fidelity-equivalent
    units.
    """
    tasks = list(stack.lows) + [stack.high]
    for t in stack.lows:
        t.cost_weight = stack.cost_ratio
    stack.high.cost_weight = 1.0
    problem = assemble_mto(tasks)
    problem.metadata["high_fidelity_task"] = problem.num_tasks - 1
    return problem


@dataclass
class BilevelProblem:
    """Nested program: minimize f_u over x_u subject to x_l maximizing f_l."""

    f_u: Callable[[np.ndarray, np.ndarray], float]
    f_l: Callable[[np.ndarray, np.ndarray], float]
    lower_u: np.ndarray
    upper_u: np.ndarray
    lower_l: np.ndarray
    upper_l: np.ndarray

    def __post_init__(self):
        for lo, hi in ((self.lower_u, self.upper_u), (self.lower_l, self.upper_l)):
            lo = np.asarray(lo, dtype=float)
            hi = np.asarray(hi, dtype=float)
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise ProblemError("invalid bilevel box bounds")
        self.lower_u = np.asarray(self.lower_u, dtype=float)
        self.upper_u = np.asarray(self.upper_u, dtype=float)
        self.lower_l = np.asarray(self.lower_l, dtype=float)
        self.upper_l = np.asarray(self.upper_l, dtype=float)

    def descriptor(self) -> str:
        return json.dumps({"kind": "bilevel",
                           "dim_u": int(self.lower_u.size),
                           "dim_l": int(self.lower_l.size)})


def make_minimax(objective: Callable[[np.ndarray, np.ndarray], float],
                 lower_u, upper_u, lower_l, upper_l) -> BilevelProblem:
    """Worst-case (minimax) problem: the lower level maximizes the same f."""
    return BilevelProblem(f_u=objective, f_l=objective,
                          lower_u=lower_u, upper_u=upper_u,
                          lower_l=lower_l, upper_l=upper_l)


@dataclass
class BilevelResult:
    x_u_best: np.ndarray
    x_l_best: np.ndarray
    f_u_best: float
    lower_level_evaluations: int
    upper_level_evaluations: int
    infeasible_candidates: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "x_u_best": [float(v) for v in np.atleast_1d(self.x_u_best)],
            "x_l_best": [float(v) for v in np.atleast_1d(self.x_l_best)],
            "f_u_best": float(self.f_u_best),
            "lower_level_evaluations": int(self.lower_level_evaluations),
            "upper_level_evaluations": int(self.upper_level_evaluations),
            "infeasible_candidates": int(self.infeasible_candidates),
        })


def _lower_level_problem(problem: BilevelProblem,
                         candidates: np.ndarray) -> MultitaskProblem:
    """One lower-level task per upper candidate, batched as an MTO."""
    tasks = []
    for p, x_u in enumerate(candidates):
        def objective(x_l, _xu=x_u.copy()):
            return float(problem.f_l(_xu, x_l))

        tasks.append(TaskDefinition(id=p, objective=objective,
                                    lower=problem.lower_l, upper=problem.upper_l))
    return assemble_mto(tasks)


def solve_bilevel(problem: BilevelProblem, config: EvolverConfig,
                  *, upper_pop: int = 20, upper_generations: int = 30,
                  rng: Optional[np.random.Generator] = None) -> BilevelResult:
    """Nested bilevel solve with a jointly-multitasked lower level.

    Each upper generation proposes ``upper_pop`` candidates; their lower-level
    problems form one multitask instance solved by the adaptive engine,
    warm-started from the previous generation's subpopulations (candidate
    slot p inherits slot p's genomes). ``config`` governs the lower-level
    runs.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if upper_pop % 2 != 0:
        raise ProblemError("upper_pop must be even")
    dim_u = problem.lower_u.size
    upper_evals = 0
    lower_evals = 0
    infeasible = 0

    def decode_u(g):
        return problem.lower_u + g * (problem.upper_u - problem.lower_u)

    genomes = rng.random((upper_pop, dim_u))
    subpops: Optional[List[np.ndarray]] = None
    best = (-np.inf, None, None)  # (-f_u, x_u, x_l)

    def eval_generation(gen_genomes, warm):
        nonlocal upper_evals, lower_evals, infeasible
        candidates = np.array([decode_u(g) for g in gen_genomes])
        mto = _lower_level_problem(problem, candidates)
        lower = run_adaptive_emt(mto, config, rng=rng, initial_subpops=warm)
        lower_evals += int(mto.evaluation_counts().sum())
        fitness = np.empty(len(gen_genomes))
        xls = []
        for p in range(len(gen_genomes)):
            x_l = decode(lower.best_solution[p], mto.tasks[p])
            value = float(problem.f_u(candidates[p], x_l))
            upper_evals += 1
            if not np.isfinite(value) or np.any(x_l < problem.lower_l) or \
                    np.any(x_l > problem.upper_l):
                infeasible += 1
                value = np.inf
            fitness[p] = -value  # upper level maximizes -f_u
            xls.append(x_l)
        return fitness, candidates, xls, lower.final_subpops

    fitness, candidates, xls, subpops = eval_generation(genomes, None)
    mut_rate = config.resolved_mutation_rate(dim_u)

    def note_best():
        nonlocal best
        i = int(np.argmax(fitness))
        if fitness[i] > best[0]:
            best = (fitness[i], candidates[i].copy(), np.asarray(xls[i]).copy())

    note_best()
    for _ in range(upper_generations):
        order = np.argsort(-fitness, kind="stable")
        new_genomes = np.empty_like(genomes)
        new_genomes[0] = genomes[order[0]]  # elitist slot
        idx = 1
        while idx < upper_pop:
            a, b = rng.integers(0, upper_pop, size=2)
            pa = a if (fitness[a], -a) >= (fitness[b], -b) else b
            a, b = rng.integers(0, upper_pop, size=2)
            pb = a if (fitness[a], -a) >= (fitness[b], -b) else b
            ca, cb, _ = assortative_mating(
                UnifiedIndividual(genomes[pa], 0), UnifiedIndividual(genomes[pb], 0),
                0.0, rng, eta=config.sbx_eta, mutation_rate=mut_rate,
                mutation_sigma=config.mutation_sigma)
            new_genomes[idx] = ca.genome
            idx += 1
            if idx < upper_pop:
                new_genomes[idx] = cb.genome
                idx += 1
        genomes = new_genomes
        fitness, candidates, xls, subpops = eval_generation(genomes, subpops)
        note_best()

    return BilevelResult(
        x_u_best=best[1], x_l_best=best[2], f_u_best=float(-best[0]),
        lower_level_evaluations=lower_evals, upper_level_evaluations=upper_evals,
        infeasible_candidates=infeasible)


@dataclass
class ScenarioSet:
    """Single-objective instances of one design problem under K scenarios."""

    scenarios: Sequence[TaskDefinition]

    def __post_init__(self):
        if not self.scenarios:
            raise ProblemError("no scenarios")
        ref = self.scenarios[0]
        for t in self.scenarios[1:]:
            if t.dim != ref.dim or not np.allclose(t.lower, ref.lower) or \
                    not np.allclose(t.upper, ref.upper):
                raise ProblemError("scenarios must share one search space")


def build_multiscenario(scenario_set: ScenarioSet) -> MultitaskProblem:
    """One task per scenario over the shared space."""
    problem = assemble_mto(list(scenario_set.scenarios))
    problem.metadata["kind"] = "multiscenario"
    return problem
