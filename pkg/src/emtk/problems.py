"""Black-box tasks, multitask problems and the unified [0,1]^D search space.

Every task is a box-constrained maximization problem. A multitask problem
collects K tasks and maps each task box invertibly into the shared random-key
box [0,1]^D, D being the largest task dimension; missing trailing coordinates
are padded at the box midpoint 0.5.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PAD_VALUE = 0.5


class ProblemError(ValueError):
    """Invalid task, problem or benchmark construction."""


@dataclass
class TaskDefinition:
    """One black-box task: objective handle plus its box-constrained space.

    The objective must be pure (same input -> same output) and is treated as
    a maximization target. ``cost_weight`` scales how this task's evaluations
    are charged when reporting budgets (used by the multi-fidelity recipe).
    """

    id: int
    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    cost_weight: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ProblemError(f"task {self.id}: bound length mismatch")
        if not np.all(self.lower < self.upper):
            raise ProblemError(f"task {self.id}: need lower < upper per coordinate")
        if self.cost_weight <= 0:
            raise ProblemError(f"task {self.id}: cost_weight must be positive")
        self._lock = threading.Lock()
        self._evaluations = 0

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def evaluations(self) -> int:
        """Number of objective calls attributed to this task."""
        return self._evaluations

    def add_evaluations(self, n: int = 1) -> None:
        with self._lock:
            self._evaluations += n

    def reset_evaluations(self) -> None:
        with self._lock:
            self._evaluations = 0


@dataclass
class MultitaskProblem:
    """K tasks plus the unified random-key space of dimension D = max d_i."""

    tasks: tuple
    unified_dim: int
    metadata: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def reset_evaluations(self) -> None:
        for t in self.tasks:
            t.reset_evaluations()

    def evaluation_counts(self) -> np.ndarray:
        return np.array([t.evaluations for t in self.tasks], dtype=int)

    def weighted_cost(self) -> float:
        """Total evaluations weighted by per-task cost."""
        return float(sum(t.evaluations * t.cost_weight for t in self.tasks))


def assemble_mto(tasks: Sequence[TaskDefinition]) -> MultitaskProblem:
    """Bundle tasks into a multitask problem; ids are reassigned in order."""
    tasks = list(tasks)
    if not tasks:
        raise ProblemError("no tasks")
    for i, task in enumerate(tasks):
        task.id = i
    unified_dim = max(t.dim for t in tasks)
    return MultitaskProblem(tasks=tuple(tasks), unified_dim=unified_dim)


def encode(x: np.ndarray, task: TaskDefinition, unified_dim: Optional[int] = None) -> np.ndarray:
    """Map a task-space point into [0,1]^D. Rejects out-of-bounds input."""
    x = np.asarray(x, dtype=float)
    if x.shape != (task.dim,):
        raise ProblemError(f"expected a length-{task.dim} vector, got shape {x.shape}")
    if np.any(x < task.lower) or np.any(x > task.upper):
        raise ProblemError("point outside the task box; encode does not clamp")
    if unified_dim is None:
        unified_dim = task.dim
    if unified_dim < task.dim:
        raise ProblemError("unified dimension smaller than task dimension")
    u = np.full(unified_dim, PAD_VALUE)
    u[: task.dim] = (x - task.lower) / (task.upper - task.lower)
    return u


def decode(u: np.ndarray, task: TaskDefinition) -> np.ndarray:
    """Map a unified point back into the task box (padding ignored)."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size < task.dim:
        raise ProblemError("unified vector shorter than task dimension")
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ProblemError("unified vector outside [0,1]")
    head = u[: task.dim]
    return task.lower + head * (task.upper - task.lower)


def evaluate(u: np.ndarray, task: TaskDefinition) -> float:
    """Objective value of a unified point; increments the task's counter."""
    value = float(task.objective(decode(u, task)))
    if not np.isfinite(value):
        raise ProblemError("non-finite fitness")
    task.add_evaluations(1)
    return value


# --- synthetic benchmark generator ------------------------------------------

def _sphere(z: np.ndarray) -> float:
    return float(np.dot(z, z))


def _rastrigin(z: np.ndarray) -> float:
    return float(10.0 * z.size + np.sum(z * z - 10.0 * np.cos(2.0 * np.pi * z)))


def _ackley(z: np.ndarray) -> float:
    a, b, c = 20.0, 0.2, 2.0 * np.pi
    d = z.size
    return float(
        -a * np.exp(-b * np.sqrt(np.sum(z * z) / d))
        - np.exp(np.sum(np.cos(c * z)) / d)
        + a
        + np.e
    )


# base function -> (callable, box half-width)
BASE_FUNCTIONS = {
    "sphere": (_sphere, 1.0),
    "rastrigin": (_rastrigin, 5.12),
    "ackley": (_ackley, 32.768),
}


@dataclass
class BenchmarkSpec:
    """Synthetic multitask benchmark with a controllable relatedness knob.

    ``relatedness`` in [0,1] places the per-task optima in unified space:
    1 puts them all at one (seeded) anchor point, 0 pushes them to opposite
    box corners. Explicit ``shifts`` override the knob placement.
    """

    function: str
    dims: Sequence[int]
    shifts: Optional[Sequence[Sequence[float]]] = None
    relatedness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.function not in BASE_FUNCTIONS:
            raise ProblemError(f"unknown base function {self.function!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dims or any(d < 1 for d in self.dims):
            raise ProblemError("dims must be positive integers")
        if not (0.0 <= self.relatedness <= 1.0):
            raise ProblemError("relatedness must lie in [0,1]")
        if self.shifts is not None:
            self.shifts = tuple(np.asarray(s, dtype=float) for s in self.shifts)
            if len(self.shifts) != len(self.dims):
                raise ProblemError("one shift vector per task required")

    def to_json(self) -> str:
        return json.dumps(
            {
                "function": self.function,
                "dims": list(self.dims),
                "shifts": None if self.shifts is None else [list(s) for s in self.shifts],
                "relatedness": self.relatedness,
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkSpec":
        return cls(**json.loads(text))


def make_benchmark(spec: BenchmarkSpec) -> MultitaskProblem:
    """Build the multitask problem described by a benchmark spec.

    Deterministic given the spec. The returned problem carries the per-task
    shift vectors (the known optima, fitness 0) in ``metadata``.
    """
    base, half = BASE_FUNCTIONS[spec.function]
    max_dim = max(spec.dims)

    if spec.shifts is not None:
        shifts = list(spec.shifts)
    else:
        rng = np.random.default_rng(spec.seed)
        anchor = rng.uniform(0.25, 0.75, size=max_dim)
        shifts = []
        r = spec.relatedness
        for i, d in enumerate(spec.dims):
            corner = np.zeros(d) if i % 2 == 0 else np.ones(d)
            u_opt = r * anchor[:d] + (1.0 - r) * corner
            shifts.append(-half + u_opt * (2.0 * half))

    tasks = []
    for i, d in enumerate(spec.dims):
        s = np.asarray(shifts[i], dtype=float)
        if s.shape != (d,):
            raise ProblemError(f"shift {i} has wrong length")
        lower = np.full(d, -half)
        upper = np.full(d, half)
        if np.any(s < lower) or np.any(s > upper):
            raise ProblemError(f"shift {i} lies outside the task box")

        def objective(x, _s=s):
            return -base(x - _s)

        tasks.append(
            TaskDefinition(
                id=i, objective=objective, lower=lower, upper=upper,
                name=f"{spec.function}-{i}",
            )
        )
    problem = assemble_mto(tasks)
    problem.metadata["shifts"] = [np.asarray(s) for s in shifts]
    problem.metadata["optimum_fitness"] = 0.0
    return problem
