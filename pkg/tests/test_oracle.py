import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from babverify import oracle
from babverify.errors import SizeCapError
from babverify.model import InputDomain, evaluate
from babverify.oracle import LpProblem, exhaustive_verify, planet_lp_bound, solve_lp
from babverify.relax import linear_backward_bounds, make_splits

from conftest import dense_net, sample_min, tiny_problem

UNIT = InputDomain([0.0], [1.0])


def _vertex_enumeration(c, A, b, lo, up):
    """Brute-force LP minimum over every basic solution of the bounded box."""
    n = len(c)
    G = np.vstack([A, -np.eye(n), np.eye(n)])
    h = np.concatenate([b, -lo, up])
    best = np.inf
    for rows in itertools.combinations(range(G.shape[0]), n):
        M = G[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, h[list(rows)])
        if np.all(G @ x <= h + 1e-9):
            best = min(best, float(c @ x))
    return best


def test_simple_lower_bound():
    res = solve_lp(LpProblem([1.0], lb=[0.3], ub=[5.0]))
    assert res.status == "optimal" and res.value == pytest.approx(0.3, abs=1e-12)


def test_triangle_vertex_optimum():
    # triangle (-1,0), (1,1), (0,0): y >= 0, y <= (x+1)/2, y >= x
    A = [[0.0, -1.0], [-0.5, 1.0], [1.0, -1.0]]
    b = [0.0, 0.5, 0.0]
    res = solve_lp(LpProblem([1.0, 1.0], A, b, lb=[-5, -5], ub=[5, 5]))
    assert res.value == pytest.approx(-1.0, abs=1e-12)
    assert np.allclose(res.x, [-1.0, 0.0])


def test_infeasible_and_unbounded():
    assert solve_lp(LpProblem([1.0], [[1.0]], [-1.0], lb=[0.0])).status == "infeasible"
    assert solve_lp(LpProblem([-1.0], lb=[0.0])).status == "unbounded"


def test_equality_and_free_variables():
    res = solve_lp(LpProblem([1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0], lb=[-np.inf, 0.0], ub=[np.inf, 3.0]))
    # x0 = 1 - x1 so the objective is 1 + x1, minimized at x1 = 0
    assert res.value == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_random_lp_matches_vertex_enumeration_and_scipy(seed):
    rng = np.random.default_rng(seed)
    n, m = 3, 4
    A, b = rng.normal(size=(m, n)), rng.uniform(0.0, 1.0, m)
    c = rng.normal(size=n)
    lo, up = -rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
    ours = solve_lp(LpProblem(c, A, b, lb=lo, ub=up))
    ref = linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, up)), method="highs")
    assert ours.value == pytest.approx(_vertex_enumeration(c, A, b, lo, up), abs=1e-9)
    assert ours.value == pytest.approx(ref.fun, abs=1e-9)


def test_size_cap():
    with pytest.raises(SizeCapError):
        solve_lp(LpProblem(np.ones(10)), max_vars=5)


def test_lp_rejects_nan():
    with pytest.raises(ValueError):
        LpProblem([np.nan])


def test_hand_built_planet_lp():
    # zhat1 = zhat2 = x on [-1, 1], output z1 - z2 (identically 0)
    net = dense_net(([[1.0], [1.0]], [0.0, 0.0]), ([[1.0, -1.0]], [0.0]))
    dom = InputDomain([-1.0], [1.0])
    st = linear_backward_bounds(net, dom)
    # z1 >= max(x, 0) and z2 <= (x + 1) / 2 give max(x, 0) - (x + 1)/2, lowest at x = 0
    assert planet_lp_bound(net, st) == pytest.approx(-0.5, abs=1e-12)
    assert exhaustive_verify(net, dom).minimum == pytest.approx(0.0, abs=1e-12)


def test_no_ambiguity_lp_is_exact(rng):
    net = dense_net((rng.uniform(0.1, 1, (3, 2)), np.full(3, 0.2)), (rng.normal(size=(1, 3)), [0.1]))
    dom = InputDomain([0.0, 0.0], [1.0, 1.0])
    st = linear_backward_bounds(net, dom)
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=2)))
    assert planet_lp_bound(net, st) == pytest.approx(evaluate(net, corners).min(), abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_lp_matches_scipy_on_planet(seed):
    net, dom = tiny_problem(seed)
    st = linear_backward_bounds(net, dom)
    prob, const, _ = oracle.planet_lp(net, st, None)
    bounds = list(zip(prob.lb, prob.ub))
    ref = linprog(prob.c, A_ub=prob.A_ub if len(prob.b_ub) else None, b_ub=prob.b_ub if len(prob.b_ub) else None,
                  A_eq=prob.A_eq if len(prob.b_eq) else None, b_eq=prob.b_eq if len(prob.b_eq) else None,
                  bounds=bounds, method="highs")
    assert planet_lp_bound(net, st) == pytest.approx(ref.fun + const, abs=1e-8)


def test_exhaustive_trivial_properties():
    up = dense_net(([[1.0]], [0.0]), ([[1.0]], [1.0]))
    res = exhaustive_verify(up, UNIT)
    assert res.status == "UNSAT" and res.minimum == pytest.approx(1.0, abs=1e-12)
    down = dense_net(([[1.0]], [0.0]), ([[1.0]], [-0.5]))
    res = exhaustive_verify(down, UNIT)
    assert res.status == "SAT" and res.witness[0] < 0.5
    assert evaluate(down, res.witness) < 0


@pytest.mark.parametrize("seed", range(10))
def test_exhaustive_minimum_below_samples(seed):
    net, dom = tiny_problem(seed, sizes=(3, 6, 6, 1))
    res = exhaustive_verify(net, dom)
    assert res.minimum <= sample_min(net, dom) + 1e-12
    assert evaluate(net, res.witness) == pytest.approx(res.minimum, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_splits_partition(seed):
    net, dom = tiny_problem(40 + seed, sizes=(3, 6, 6, 1))
    whole = exhaustive_verify(net, dom).minimum
    st = linear_backward_bounds(net, dom)
    k, j = st.ambiguous_neurons()[0]
    parts = [exhaustive_verify(net, dom, splits=make_splits(net, [(k, j, ph)])).minimum for ph in (1, -1)]
    assert min(parts) == pytest.approx(whole, abs=1e-9)


def test_exhaustive_size_cap():
    net, dom = tiny_problem(0, sizes=(2, 13, 13, 1))
    with pytest.raises(SizeCapError):
        exhaustive_verify(net, dom)
