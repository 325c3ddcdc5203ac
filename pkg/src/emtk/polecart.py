"""Double-pole balancing benchmark: physics, neural controller, task family.

A cart on a finite track carries two hinged poles of different lengths. A
6-input tanh network (6 -> 10 -> 1, 81 weights) reads the state and outputs
a bounded horizontal force; an episode succeeds when both poles stay within
the failure angle and the cart stays on the track for ``max_steps`` control
steps. The per-step physics and the episode loop are the hot kernels and are
numba-compiled unless EMTK_DISABLE_NUMBA is set (see :mod:`emtk._accel`).

Equations of motion follow the standard two-pole formulation with uniform
rods (half-length l, mass per meter 0.1 kg), gravity written as -9.8 m/s^2:

    th_acc_i = -(3 / (4 l_i)) (x_acc cos th_i + g sin th_i + mu_p th_dot_i / (m_i l_i))
    x_acc    = (F - mu_c sgn(x_dot) + sum_i Feff_i) / (M + sum_i meff_i)
    Feff_i   = m_i l_i th_dot_i^2 sin th_i + 0.75 m_i cos th_i (mu_p th_dot_i / (m_i l_i) + g sin th_i)
    meff_i   = m_i (1 - 0.75 cos^2 th_i)
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from ._accel import maybe_njit
from .problems import MultitaskProblem, ProblemError, TaskDefinition, assemble_mto

GRAVITY = -9.8
N_WEIGHTS = 81          # 6*10 + 10 + 10*1 + 1
N_HIDDEN = 10
STATE_NORM = np.array([2.4, 10.0, 0.6283, 5.0, 0.6283, 5.0])

FAIL_NONE = 0
FAIL_POLE_ANGLE = 1
FAIL_TRACK_BOUNDS = 2
FAIL_BLOWUP = 3


class FailureCause(Enum):
    none = "none"
    pole_angle = "pole_angle"
    track_bounds = "track_bounds"
    blowup = "blowup"


_CAUSES = {FAIL_NONE: FailureCause.none, FAIL_POLE_ANGLE: FailureCause.pole_angle,
           FAIL_TRACK_BOUNDS: FailureCause.track_bounds, FAIL_BLOWUP: FailureCause.blowup}


@dataclass
class PoleCartParams:
    """Physical and episode constants of the double-pole cart system."""

    short_pole_length: float = 0.6
    long_pole_length: float = 1.0
    cart_mass: float = 1.0
    pole_mass_per_meter: float = 0.1
    track_half_width: float = 2.4
    fail_angle: float = math.radians(36.0)
    force_limit: float = 10.0
    timestep: float = 0.01
    control_every: int = 2      # integration steps per control step
    max_steps: int = 5000       # control steps
    mu_cart: float = 0.0
    mu_pole: float = 0.0
    gravity: float = GRAVITY
    initial_theta1: float = math.radians(1.0)
    weight_bound: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.short_pole_length < self.long_pole_length):
            raise ProblemError("short pole length must lie in (0, long pole length)")
        if self.timestep <= 0:
            raise ProblemError("timestep must be positive")

    def with_friction(self, mu_cart: float = 5e-4, mu_pole: float = 2e-6) -> "PoleCartParams":
        out = PoleCartParams(**{**asdict(self), "mu_cart": mu_cart, "mu_pole": mu_pole})
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "PoleCartParams":
        return cls(**json.loads(text))

    # derived quantities (Wieland convention: l = half length)
    @property
    def pole_masses(self):
        return (self.pole_mass_per_meter * self.long_pole_length,
                self.pole_mass_per_meter * self.short_pole_length)

    @property
    def half_lengths(self):
        return (0.5 * self.long_pole_length, 0.5 * self.short_pole_length)

    def initial_state(self) -> np.ndarray:
        s = np.zeros(6)
        s[2] = self.initial_theta1
        return s


@dataclass
class EpisodeResult:
    steps_balanced: int
    success: bool
    failure_cause: FailureCause


@maybe_njit(cache=True)
def _derivs(x, x_dot, t1, t1_dot, t2, t2_dot, force,
            mc, m1, l1, m2, l2, mu_c, mu_p, g):
    sgn = 0.0
    if x_dot > 0.0:
        sgn = 1.0
    elif x_dot < 0.0:
        sgn = -1.0

    c1 = math.cos(t1)
    s1 = math.sin(t1)
    c2 = math.cos(t2)
    s2 = math.sin(t2)

    f1 = m1 * l1 * t1_dot * t1_dot * s1 + 0.75 * m1 * c1 * (mu_p * t1_dot / (m1 * l1) + g * s1)
    f2 = m2 * l2 * t2_dot * t2_dot * s2 + 0.75 * m2 * c2 * (mu_p * t2_dot / (m2 * l2) + g * s2)
    me1 = m1 * (1.0 - 0.75 * c1 * c1)
    me2 = m2 * (1.0 - 0.75 * c2 * c2)

    x_acc = (force - mu_c * sgn + f1 + f2) / (mc + me1 + me2)
    t1_acc = -0.75 / l1 * (x_acc * c1 + g * s1 + mu_p * t1_dot / (m1 * l1))
    t2_acc = -0.75 / l2 * (x_acc * c2 + g * s2 + mu_p * t2_dot / (m2 * l2))
    return x_dot, x_acc, t1_dot, t1_acc, t2_dot, t2_acc


@maybe_njit(cache=True)
def _rk4(x, xd, t1, t1d, t2, t2d, force, h,
         mc, m1, l1, m2, l2, mu_c, mu_p, g):
    k1 = _derivs(x, xd, t1, t1d, t2, t2d, force, mc, m1, l1, m2, l2, mu_c, mu_p, g)
    k2 = _derivs(x + 0.5 * h * k1[0], xd + 0.5 * h * k1[1],
                 t1 + 0.5 * h * k1[2], t1d + 0.5 * h * k1[3],
                 t2 + 0.5 * h * k1[4], t2d + 0.5 * h * k1[5],
                 force, mc, m1, l1, m2, l2, mu_c, mu_p, g)
    k3 = _derivs(x + 0.5 * h * k2[0], xd + 0.5 * h * k2[1],
                 t1 + 0.5 * h * k2[2], t1d + 0.5 * h * k2[3],
                 t2 + 0.5 * h * k2[4], t2d + 0.5 * h * k2[5],
                 force, mc, m1, l1, m2, l2, mu_c, mu_p, g)
    k4 = _derivs(x + h * k3[0], xd + h * k3[1],
                 t1 + h * k3[2], t1d + h * k3[3],
                 t2 + h * k3[4], t2d + h * k3[5],
                 force, mc, m1, l1, m2, l2, mu_c, mu_p, g)
    c = h / 6.0
    return (x + c * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            xd + c * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            t1 + c * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            t1d + c * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
            t2 + c * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4]),
            t2d + c * (k1[5] + 2.0 * k2[5] + 2.0 * k3[5] + k4[5]))


@maybe_njit(cache=True)
def _forward(w, s0, s1, s2, s3, s4, s5, force_limit):
    out = w[80]
    for j in range(10):
        acc = (w[6 * j] * s0 + w[6 * j + 1] * s1 + w[6 * j + 2] * s2
               + w[6 * j + 3] * s3 + w[6 * j + 4] * s4 + w[6 * j + 5] * s5
               + w[60 + j])
        out += w[70 + j] * math.tanh(acc)
    return math.tanh(out) * force_limit


@maybe_njit(cache=True)
def _episode(w, state0, mc, m1, l1, m2, l2, mu_c, mu_p, g,
             half_track, fail_angle, force_limit, h, control_every, max_steps,
             n0, n1, n2, n3, n4, n5):
    x = state0[0]
    xd = state0[1]
    t1 = state0[2]
    t1d = state0[3]
    t2 = state0[4]
    t2d = state0[5]
    for step in range(max_steps):
        force = _forward(w, x / n0, xd / n1, t1 / n2, t1d / n3, t2 / n4, t2d / n5,
                         force_limit)
        for _ in range(control_every):
            x, xd, t1, t1d, t2, t2d = _rk4(x, xd, t1, t1d, t2, t2d, force, h,
                                           mc, m1, l1, m2, l2, mu_c, mu_p, g)
            if not (math.isfinite(x) and math.isfinite(t1) and math.isfinite(t2)):
                return step, FAIL_BLOWUP
            if abs(t1) > fail_angle or abs(t2) > fail_angle:
                return step, FAIL_POLE_ANGLE
            if abs(x) > half_track:
                return step, FAIL_TRACK_BOUNDS
    return max_steps, FAIL_NONE


def _phys(params: PoleCartParams):
    m1, m2 = params.pole_masses
    l1, l2 = params.half_lengths
    return (params.cart_mass, m1, l1, m2, l2, params.mu_cart, params.mu_pole,
            params.gravity)


def dynamics(state: np.ndarray, force: float, params: PoleCartParams) -> np.ndarray:
    """Time derivative of the six-variable state; pure function."""
    state = np.asarray(state, dtype=float)
    if state.shape != (6,):
        raise ProblemError("state must have six entries")
    if abs(force) > params.force_limit + 1e-12:
        raise ProblemError("force exceeds the actuator limit")
    out = np.array(_derivs(state[0], state[1], state[2], state[3], state[4],
                           state[5], float(force), *_phys(params)))
    if not np.all(np.isfinite(out)):
        raise ProblemError("dynamics blow-up")
    return out


def rk4_step(state: np.ndarray, force: float, h: float,
             params: PoleCartParams) -> np.ndarray:
    """One classical RK4 step with the force held constant."""
    state = np.asarray(state, dtype=float)
    out = np.array(_rk4(state[0], state[1], state[2], state[3], state[4],
                        state[5], float(force), float(h), *_phys(params)))
    if not np.all(np.isfinite(out)):
        raise ProblemError("dynamics blow-up")
    return out


def rk4_step_fn(f, y: np.ndarray, h: float) -> np.ndarray:
    """Generic classical RK4 step for an autonomous system y' = f(y)."""
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(y))
    k2 = np.asarray(f(y + 0.5 * h * k1))
    k3 = np.asarray(f(y + 0.5 * h * k2))
    k4 = np.asarray(f(y + h * k3))
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def controller_force(weights: np.ndarray, state: np.ndarray,
                     params: PoleCartParams) -> float:
    """Network output force in [-force_limit, force_limit]."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (N_WEIGHTS,):
        raise ProblemError(f"controller expects {N_WEIGHTS} weights")
    s = np.asarray(state, dtype=float) / STATE_NORM
    return float(_forward(np.ascontiguousarray(weights), s[0], s[1], s[2],
                          s[3], s[4], s[5], params.force_limit))


def simulate_episode(weights: np.ndarray, params: PoleCartParams,
                     initial_state: Optional[np.ndarray] = None) -> EpisodeResult:
    """Closed-loop episode from the configured (deterministic) initial state."""
    weights = np.ascontiguousarray(np.asarray(weights, dtype=float))
    if weights.shape != (N_WEIGHTS,):
        raise ProblemError(f"controller expects {N_WEIGHTS} weights")
    state0 = params.initial_state() if initial_state is None else \
        np.asarray(initial_state, dtype=float)
    steps, cause = _episode(
        weights, state0, *_phys(params),
        params.track_half_width, params.fail_angle, params.force_limit,
        params.timestep, params.control_every, params.max_steps,
        STATE_NORM[0], STATE_NORM[1], STATE_NORM[2],
        STATE_NORM[3], STATE_NORM[4], STATE_NORM[5])
    return EpisodeResult(steps_balanced=int(steps),
                         success=(cause == FAIL_NONE and steps == params.max_steps),
                         failure_cause=_CAUSES[int(cause)])


def mechanical_energy(state: np.ndarray, params: PoleCartParams) -> float:
    """Total mechanical energy (for the frictionless conservation check)."""
    x, xd, t1, t1d, t2, t2d = np.asarray(state, dtype=float)
    mc = params.cart_mass
    (m1, m2), (l1, l2) = params.pole_masses, params.half_lengths
    g = -params.gravity
    e = 0.5 * mc * xd * xd
    for m, l, th, thd in ((m1, l1, t1, t1d), (m2, l2, t2, t2d)):
        v2 = xd * xd + 2.0 * l * xd * thd * math.cos(th) + l * l * thd * thd
        e += 0.5 * m * v2 + 0.5 * (m * l * l / 3.0) * thd * thd
        e += m * g * l * math.cos(th)
    return float(e)


def linearized_dynamics_matrix(params: PoleCartParams) -> np.ndarray:
    """Jacobian of the zero-force dynamics at the upright equilibrium."""
    A = np.zeros((6, 6))
    eps = 1e-7
    base = np.zeros(6)
    for k in range(6):
        hi = base.copy()
        lo = base.copy()
        hi[k] += eps
        lo[k] -= eps
        A[:, k] = (dynamics(hi, 0.0, params) - dynamics(lo, 0.0, params)) / (2 * eps)
    return A


def episode_trace_to_csv(weights: np.ndarray, params: PoleCartParams, path) -> None:
    """Debug dump: per-control-step state and applied force."""
    weights = np.asarray(weights, dtype=float)
    state = params.initial_state()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "x", "x_dot", "theta1", "theta1_dot",
                         "theta2", "theta2_dot", "force"])
        for step in range(params.max_steps):
            force = controller_force(weights, state, params)
            writer.writerow([step] + [repr(float(v)) for v in state] + [repr(force)])
            for _ in range(params.control_every):
                state = rk4_step(state, force, params.timestep, params)
            if (abs(state[2]) > params.fail_angle or abs(state[4]) > params.fail_angle
                    or abs(state[0]) > params.track_half_width):
                break


def make_polecart_tasks(short_pole_lengths: Sequence[float],
                        params: Optional[PoleCartParams] = None) -> MultitaskProblem:
    """One 81-dimensional neurocontroller task per short-pole length."""
    base = params or PoleCartParams()
    tasks = []
    for i, ls in enumerate(short_pole_lengths):
        p = PoleCartParams(**{**asdict(base), "short_pole_length": float(ls)})

        def objective(w, _p=p):
            return float(simulate_episode(w, _p).steps_balanced)

        w = base.weight_bound
        tasks.append(TaskDefinition(
            id=i, objective=objective,
            lower=np.full(N_WEIGHTS, -w), upper=np.full(N_WEIGHTS, w),
            name=f"polecart-ls={ls}"))
    problem = assemble_mto(tasks)
    problem.metadata["short_pole_lengths"] = [float(v) for v in short_pole_lengths]
    problem.metadata["max_steps"] = base.max_steps
    problem.metadata["params"] = base
    return problem


def success_rate(run_one, problem_factory, n_runs: int, base_seed: int = 0):
    """Fraction of seeded runs whose best controller fully balances, per task.

    ``run_one(problem, seed) -> per-task best fitness array`` supplies the
    engine; ``problem_factory()`` builds a fresh problem (fresh counters) per
    run. Success on a task means best fitness reached ``max_steps``.
    """
    if n_runs < 1:
        raise ProblemError("n_runs must be >= 1")
    successes = None
    for r in range(n_runs):
        problem = problem_factory()
        best = np.asarray(run_one(problem, base_seed + r), dtype=float)
        target = float(problem.metadata["max_steps"])
        hit = best >= target
        successes = hit.astype(int) if successes is None else successes + hit
    return successes / n_runs
