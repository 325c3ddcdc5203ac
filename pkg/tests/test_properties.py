"""Property-based invariants for the encoding, operators and transfer math."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emtk.engine import Population, factorial_ranks, gaussian_mutation, sbx_crossover
from emtk.problems import TaskDefinition, decode, encode
from emtk.transfer import TransferMatrix, fit_task_model, update_transfer_matrix

unit_floats = st.floats(0.0, 1.0, allow_nan=False)
dims = st.integers(1, 8)


def unit_vectors(dim):
    return arrays(np.float64, dim, elements=unit_floats)


@st.composite
def task_and_point(draw):
    d = draw(dims)
    lo = draw(arrays(np.float64, d, elements=st.floats(-100, 99, allow_nan=False)))
    width = draw(arrays(np.float64, d, elements=st.floats(1e-3, 50, allow_nan=False)))
    task = TaskDefinition(id=0, objective=lambda x: 0.0, lower=lo, upper=lo + width)
    frac = draw(unit_vectors(d))
    return task, task.lower + frac * (task.upper - task.lower)


@given(task_and_point(), st.integers(0, 4))
@settings(max_examples=150, deadline=None)
def test_encode_decode_round_trip(tp, pad):
    task, x = tp
    u = encode(x, task, unified_dim=task.dim + pad)
    assert np.all((u >= 0) & (u <= 1))
    np.testing.assert_allclose(decode(u, task), x, atol=1e-9 * np.max(
        np.abs(task.upper - task.lower)))


@given(st.integers(1, 10), st.floats(0.5, 50), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_sbx_closure(dim, eta, seed):
    rng = np.random.default_rng(seed)
    p1 = rng.random(dim)
    p2 = rng.random(dim)
    c1, c2 = sbx_crossover(p1, p2, eta, rng)
    for c in (c1, c2):
        assert c.shape == (dim,)
        assert np.all((c >= 0) & (c <= 1))


@given(st.integers(1, 10), st.floats(0, 1), st.floats(0, 0.5),
       st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_mutation_closure(dim, rate, sigma, seed):
    rng = np.random.default_rng(seed)
    u = rng.random(dim)
    out = gaussian_mutation(u, sigma, rate, rng)
    assert np.all((out >= 0) & (out <= 1))


@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_factorial_ranks_are_a_bijection(n, n_tasks, seed):
    rng = np.random.default_rng(seed)
    pop = Population(
        genomes=rng.random((n, 2)),
        skill_factor=rng.integers(0, n_tasks, n),
        fitness=rng.normal(size=n),
    )
    for t in range(n_tasks):
        ranks = factorial_ranks(pop, t)
        mine = pop.skill_factor == t
        m = int(mine.sum())
        # the evaluated members carry each rank 1..m exactly once
        assert sorted(ranks[mine]) == list(range(1, m + 1))
        assert np.all(ranks[~mine] == m + 1)


@given(st.integers(2, 4), st.integers(3, 10), st.integers(0, 2**31 - 1),
       st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_transfer_update_preserves_simplex(k, n_elite, seed, n_steps):
    rng = np.random.default_rng(seed)
    elites = [np.clip(rng.normal(rng.random(), 0.2, (n_elite, 3)), 0, 1)
              for _ in range(k)]
    models = [fit_task_model(e) for e in elites]
    W = TransferMatrix.uniform(k)
    for _ in range(3):
        W = update_transfer_matrix(W, elites, models, n_steps=n_steps)
        assert np.all(W.w >= 0)
        np.testing.assert_allclose(W.w.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(W.w) >= 0.05 - 1e-12)
