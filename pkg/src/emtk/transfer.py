"""Multitask engines: implicit MFEA, adaptive mixture-model EMT, explicit islands.

The adaptive engine keeps one diagonal-Gaussian model per task over the
unified box and a row-stochastic transfer matrix W. Each generation half of a
task's offspring are drawn from its row mixture (source task j with
probability w_ij, then a truncated-Gaussian sample from task j's model) and W
is re-estimated by one EM step on the task's elite genomes.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from .engine import (
    EngineError,
    EvolverConfig,
    MultifactorialEvolver,
    Population,
    RunResult,
    UnifiedIndividual,
    assortative_mating,
    init_population,
    task_rng,
)
from .problems import MultitaskProblem, TaskDefinition, assemble_mto, decode, encode, evaluate

log = logging.getLogger(__name__)

SIGMA_MIN = 0.01
DIAG_FLOOR = 0.05
ELITE_FRACTION = 0.5
MIXTURE_FRACTION = 0.5

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class TransferMatrix:
    """Row-stochastic K x K mixture coefficients w_ij."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise EngineError("transfer matrix must be square")

    @property
    def num_tasks(self) -> int:
        return self.w.shape[0]

    def validate(self, diag_floor: float = DIAG_FLOOR) -> None:
        if np.any(self.w < 0):
            raise EngineError("transfer weights must be nonnegative")
        if np.any(np.abs(self.w.sum(axis=1) - 1.0) > 1e-9):
            raise EngineError("transfer matrix rows must sum to 1")
        if np.any(np.diag(self.w) < diag_floor - 1e-12):
            raise EngineError("diagonal transfer weight below floor")

    @classmethod
    def uniform(cls, num_tasks: int) -> "TransferMatrix":
        return cls(np.full((num_tasks, num_tasks), 1.0 / num_tasks))


@dataclass
class SearchDistributionModel:
    """Diagonal Gaussian over unified space, truncated to [0,1]^D."""

    mean: np.ndarray
    stdev: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.stdev = np.asarray(self.stdev, dtype=float)
        if self.mean.shape != self.stdev.shape:
            raise EngineError("mean/stdev shape mismatch")
        if np.any(self.stdev <= 0):
            raise EngineError("stdev entries must be positive")

    def logpdf(self, u: np.ndarray) -> np.ndarray:
        """Log density of one point (D,) or a batch (n, D)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        z = (u - self.mean) / self.stdev
        a = (0.0 - self.mean) / self.stdev
        b = (1.0 - self.mean) / self.stdev
        log_norm = np.log(ndtr(b) - ndtr(a))
        per_coord = -0.5 * z * z - np.log(self.stdev) - _LOG_SQRT_2PI - log_norm
        return per_coord.sum(axis=1)

    def pdf(self, u: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(u))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact truncated-Gaussian samples via inverse-CDF per coordinate."""
        a = ndtr((0.0 - self.mean) / self.stdev)
        b = ndtr((1.0 - self.mean) / self.stdev)
        p = a + rng.random((n, self.mean.size)) * (b - a)
        x = self.mean + self.stdev * ndtri(p)
        return np.clip(x, 0.0, 1.0)


def fit_task_model(elite_genomes: np.ndarray,
                   sigma_min: float = SIGMA_MIN) -> SearchDistributionModel:
    """Coordinate-wise sample mean/stdev of elite genomes, stdev floored."""
    x = np.asarray(elite_genomes, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EngineError("degenerate model: need at least 2 elite genomes")
    mean = x.mean(axis=0)
    stdev = np.maximum(x.std(axis=0, ddof=1), sigma_min)
    return SearchDistributionModel(mean=mean, stdev=stdev)


def mixture_density(u: np.ndarray, models: Sequence[SearchDistributionModel],
                    w_row: np.ndarray) -> float:
    """Mixture density sum_j w_j * p_j(u), truncated-Gaussian components."""
    w_row = np.asarray(w_row, dtype=float)
    if len(models) != w_row.size:
        raise EngineError("one weight per model required")
    logs = np.array([m.logpdf(u)[0] for m in models])
    with np.errstate(divide="ignore"):
        logw = np.log(np.maximum(w_row, 1e-300))
    return float(np.exp(logsumexp(logw + logs)))


def mixture_log_likelihood(points: np.ndarray,
                           models: Sequence[SearchDistributionModel],
                           w_row: np.ndarray) -> float:
    """Summed log mixture density over a batch of points."""
    w_row = np.asarray(w_row, dtype=float)
    logp = np.stack([m.logpdf(points) for m in models])        # (K, n)
    with np.errstate(divide="ignore"):
        logw = np.log(np.maximum(w_row, 1e-300))
    return float(logsumexp(logw[:, None] + logp, axis=0).sum())


def update_transfer_matrix(W: TransferMatrix,
                           elite_sets: Sequence[np.ndarray],
                           models: Sequence[SearchDistributionModel],
                           n_steps: int = 1,
                           diag_floor: float = DIAG_FLOOR) -> TransferMatrix:
    """EM re-estimation of the mixture weights with fixed components.

    For each task i the responsibilities of the K task models for task i's
    elite genomes are averaged into the new row; the diagonal entry is then
    floored and the row renormalized. The pre-flooring update is a standard
    EM step, so the elite log-likelihood never decreases.
    """
    K = W.num_tasks
    if len(elite_sets) != K or len(models) != K:
        raise EngineError("need one elite set and one model per task")
    new_w = np.array(W.w, dtype=float)
    for i in range(K):
        pts = np.asarray(elite_sets[i], dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EngineError(f"task {i}: empty elite set")
        logp = np.stack([m.logpdf(pts) for m in models])       # (K, n)
        row = new_w[i].copy()
        for _ in range(n_steps):
            with np.errstate(divide="ignore"):
                logr = np.log(np.maximum(row, 1e-300))[:, None] + logp
            norm = logsumexp(logr, axis=0)
            keep = np.isfinite(norm)
            if not np.all(keep):
                log.warning("task %d: dropping %d elite points with underflowed "
                            "mixture density", i, int((~keep).sum()))
                logr = logr[:, keep]
                norm = norm[keep]
            if norm.size == 0:
                continue
            resp = np.exp(logr - norm)
            row = resp.mean(axis=1)
        row[i] = max(row[i], diag_floor)
        new_w[i] = row / row.sum()
    out = TransferMatrix(new_w)
    out.validate(diag_floor=min(diag_floor, np.diag(out.w).min() + 1e-12))
    return out


@dataclass
class MigrationEvent:
    generation: int
    source_task: int
    dest_task: int
    migrant_rank: int
    fitness_before: float
    fitness_after: float


@dataclass
class MultitaskRunResult(RunResult):
    """RunResult plus the transfer-specific traces."""

    transfer_trace: List[np.ndarray] = field(default_factory=list)
    migration_log: List[MigrationEvent] = field(default_factory=list)
    inter_skill_crossovers: int = 0
    final_subpops: Optional[List[np.ndarray]] = None

    def transfer_trace_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "i", "j", "w_ij"])
            for gen, w in enumerate(self.transfer_trace):
                for i in range(w.shape[0]):
                    for j in range(w.shape[1]):
                        writer.writerow([gen, i, j, repr(float(w[i, j]))])

    def migration_log_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generation", "source_task", "dest_task",
                             "migrant_rank", "fitness_before", "fitness_after"])
            for ev in self.migration_log:
                writer.writerow([ev.generation, ev.source_task, ev.dest_task,
                                 ev.migrant_rank, repr(ev.fitness_before),
                                 repr(ev.fitness_after)])


def run_mfea(problem: MultitaskProblem, config: EvolverConfig, rmp: float = 0.3,
             rng: Optional[np.random.Generator] = None) -> MultitaskRunResult:
    """Implicit single-population multifactorial EA over the unified space."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    engine = MultifactorialEvolver(problem, config, rmp=rmp, rng=rng)
    engine.run()
    base = engine.result()
    return MultitaskRunResult(
        best_fitness_trace=base.best_fitness_trace,
        best_solution=base.best_solution,
        evaluations_used=base.evaluations_used,
        seed=base.seed,
        evaluations_trace=base.evaluations_trace,
        inter_skill_crossovers=engine.inter_skill_crossovers,
    )


def _tournament_index(fitness: np.ndarray, rng: np.random.Generator) -> int:
    i, j = rng.integers(0, fitness.size, size=2)
    if (fitness[i], -i) >= (fitness[j], -j):
        return int(i)
    return int(j)


def _elite_rows(genomes: np.ndarray, fitness: np.ndarray, frac: float) -> np.ndarray:
    n_elite = max(2, int(round(frac * fitness.size)))
    order = np.argsort(-fitness, kind="stable")
    return genomes[order[:n_elite]]


def run_adaptive_emt(problem: MultitaskProblem, config: EvolverConfig,
                     rng: Optional[np.random.Generator] = None,
                     *, mixture_fraction: float = MIXTURE_FRACTION,
                     elite_fraction: float = ELITE_FRACTION,
                     sigma_min: float = SIGMA_MIN,
                     diag_floor: float = DIAG_FLOOR,
                     initial_subpops: Optional[List[np.ndarray]] = None,
                     ) -> MultitaskRunResult:
    """Adaptive mixture-model EMT with per-task subpopulations.

    ``config.pop_size`` is the size of each task's subpopulation. When
    ``initial_subpops`` is given (warm start), those genomes seed the
    subpopulations instead of uniform sampling.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    K = problem.num_tasks
    D = problem.unified_dim
    cfg = config
    mut_rate = cfg.resolved_mutation_rate(D)
    n = cfg.pop_size

    genomes = []
    fitness = []
    for t in range(K):
        if initial_subpops is not None:
            g = np.clip(np.asarray(initial_subpops[t], dtype=float), 0.0, 1.0)
            if g.shape != (n, D):
                raise EngineError("warm-start subpopulation has wrong shape")
            g = g.copy()
        else:
            g = rng.random((n, D))
        f = np.array([evaluate(g[i], problem.tasks[t]) for i in range(n)])
        genomes.append(g)
        fitness.append(f)

    evals = np.full(K, n, dtype=int)
    best_fit = np.array([f.max() for f in fitness])
    best_sol = [genomes[t][int(np.argmax(fitness[t]))].copy() for t in range(K)]
    trace = [best_fit.copy()]
    evals_trace = [evals.copy()]

    W = TransferMatrix.uniform(K)
    transfer_trace = [W.w.copy()]

    for _ in range(cfg.generations):
        if cfg.max_evaluations is not None and np.any(evals >= cfg.max_evaluations):
            break
        models = [fit_task_model(_elite_rows(genomes[t], fitness[t], elite_fraction),
                                 sigma_min=sigma_min) for t in range(K)]
        for t in range(K):
            n_off = n - cfg.elitism
            n_mix = int(round(mixture_fraction * n_off))
            kids = np.empty((n_off, D))
            # mixture-sampled offspring: pick source tasks, then draw from models
            sources = rng.choice(K, size=n_mix, p=W.w[t])
            for m_idx in range(n_mix):
                kids[m_idx] = models[int(sources[m_idx])].sample(1, rng)[0]
            # within-task SBX + mutation for the remainder
            idx = n_mix
            while idx < n_off:
                a = _tournament_index(fitness[t], rng)
                b = _tournament_index(fitness[t], rng)
                pa = UnifiedIndividual(genomes[t][a], t)
                pb = UnifiedIndividual(genomes[t][b], t)
                ca, cb, _ = assortative_mating(
                    pa, pb, 0.0, rng, eta=cfg.sbx_eta,
                    mutation_rate=mut_rate, mutation_sigma=cfg.mutation_sigma)
                kids[idx] = ca.genome
                idx += 1
                if idx < n_off:
                    kids[idx] = cb.genome
                    idx += 1
            kid_fit = np.array([evaluate(kids[i], problem.tasks[t])
                                for i in range(n_off)])
            evals[t] += n_off

            order = np.argsort(-fitness[t], kind="stable")
            elite_idx = order[: cfg.elitism]
            genomes[t] = np.vstack([genomes[t][elite_idx], kids])
            fitness[t] = np.concatenate([fitness[t][elite_idx], kid_fit])

            gen_best = int(np.argmax(fitness[t]))
            if fitness[t][gen_best] > best_fit[t]:
                best_fit[t] = fitness[t][gen_best]
                best_sol[t] = genomes[t][gen_best].copy()

        elite_sets = [_elite_rows(genomes[t], fitness[t], elite_fraction)
                      for t in range(K)]
        W = update_transfer_matrix(W, elite_sets, models, n_steps=1,
                                   diag_floor=diag_floor)
        trace.append(best_fit.copy())
        evals_trace.append(evals.copy())
        transfer_trace.append(W.w.copy())

    trace_arr = np.array(trace)
    evals_arr = np.array(evals_trace)
    return MultitaskRunResult(
        best_fitness_trace=[trace_arr[:, t].copy() for t in range(K)],
        best_solution=best_sol,
        evaluations_used=evals.copy(),
        seed=cfg.seed,
        evaluations_trace=[evals_arr[:, t].copy() for t in range(K)],
        transfer_trace=transfer_trace,
        final_subpops=[g.copy() for g in genomes],
    )


def map_between_tasks(x: np.ndarray, task_i: TaskDefinition,
                      task_j: TaskDefinition) -> np.ndarray:
    """Map a task-i point into task j's box through the unified space.

    Affine between boxes on shared coordinates; extra target coordinates sit
    at the box midpoint, extra source coordinates are dropped.
    """
    u = encode(x, task_i, unified_dim=max(task_i.dim, task_j.dim))
    return decode(u[: task_j.dim] if u.size >= task_j.dim else u, task_j)


def run_explicit_emt(problem: MultitaskProblem, config: EvolverConfig,
                     transfer_interval: int = 5, n_migrants: int = 1,
                     ) -> MultitaskRunResult:
    """Explicit island-model EMT: independent per-task CEA subpopulations
    with periodic best-out / replace-worst migration through the unified map.

    Each subpopulation evolves in its own task's random-key box (dimension
    d_i) on its own random stream, so with ``transfer_interval`` beyond the
    generation count the run is identical to independent CEA runs seeded by
    :func:`emtk.engine.task_rng`.
    """
    K = problem.num_tasks
    if K < 2:
        raise EngineError("explicit EMT needs at least 2 tasks")
    if transfer_interval < 1:
        raise EngineError("transfer_interval must be >= 1")
    if not (0 < n_migrants < config.pop_size):
        raise EngineError("n_migrants must lie in (0, pop_size)")
    if (K - 1) * n_migrants >= config.pop_size:
        raise EngineError("too many incoming migrants for the subpopulation size")

    islands = []
    for t, task in enumerate(problem.tasks):
        sub = MultitaskProblem(tasks=(task,), unified_dim=task.dim)
        islands.append(MultifactorialEvolver(sub, config, rmp=0.0,
                                             rng=task_rng(config.seed, t)))

    migration_log: List[MigrationEvent] = []
    for gen in range(1, config.generations + 1):
        if any(isl.budget_exhausted() for isl in islands):
            break
        for isl in islands:
            isl.step()
            isl.record()

        if gen % transfer_interval == 0:
            # collect the n best of each island, in task space
            outgoing = []
            for i, isl in enumerate(islands):
                order = np.argsort(-isl.pop.fitness, kind="stable")
                picks = []
                for rank, idx in enumerate(order[:n_migrants], start=1):
                    x = decode(isl.pop.genomes[idx], problem.tasks[i])
                    picks.append((rank, x))
                outgoing.append(picks)
            for j, isl in enumerate(islands):
                incoming = []
                for i in range(K):
                    if i == j:
                        continue
                    for rank, x in outgoing[i]:
                        incoming.append((i, rank, x))
                worst = np.argsort(isl.pop.fitness, kind="stable")[: len(incoming)]
                for slot, (i, rank, x) in zip(worst, incoming):
                    mapped = map_between_tasks(x, problem.tasks[i], problem.tasks[j])
                    genome = encode(mapped, problem.tasks[j])
                    before = float(isl.pop.fitness[slot])
                    isl.pop.genomes[slot] = genome
                    isl.pop.skill_factor[slot] = 0
                    isl._evaluate_member(int(slot))
                    migration_log.append(MigrationEvent(
                        generation=gen, source_task=i, dest_task=j,
                        migrant_rank=rank, fitness_before=before,
                        fitness_after=float(isl.pop.fitness[slot])))
                isl._update_bests()

    K_traces = [isl.result() for isl in islands]
    n_gens = min(len(r.best_fitness_trace[0]) for r in K_traces)
    return MultitaskRunResult(
        best_fitness_trace=[r.best_fitness_trace[0][:n_gens] for r in K_traces],
        best_solution=[r.best_solution[0] for r in K_traces],
        evaluations_used=np.array([int(r.evaluations_used[0]) for r in K_traces]),
        seed=config.seed,
        evaluations_trace=[r.evaluations_trace[0][:n_gens] for r in K_traces],
        migration_log=migration_log,
    )
