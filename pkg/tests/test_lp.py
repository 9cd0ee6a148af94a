import itertools

import numpy as np
import pytest

from neurosym.lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LpProblem, solve_lp
from oracles import highs


def test_min_x_above_one():
    sol = solve_lp(LpProblem(np.array([1.0]), A_ub=[[-1.0]], b_ub=[-1.0], lb=[-np.inf]))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(1.0)


def test_contradictory_bounds_infeasible():
    sol = solve_lp(LpProblem(np.array([0.0]), A_ub=[[1.0], [-1.0]], b_ub=[-1.0, -1.0], lb=[-np.inf]))
    assert sol.status == INFEASIBLE


def test_unbounded():
    sol = solve_lp(LpProblem(np.array([-1.0])))
    assert sol.status == UNBOUNDED


def test_equality_rows():
    # min x + 2y, x + y = 1, x, y >= 0 -> (1, 0)
    sol = solve_lp(LpProblem(np.array([1.0, 2.0]), A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    assert sol.status == OPTIMAL
    assert np.allclose(sol.x, [1.0, 0.0])


def test_non_finite_coefficients_rejected():
    with pytest.raises(ValueError):
        solve_lp(LpProblem(np.array([np.nan])))


def _vertex_optimum(c, A, b):
    """Best objective over all basic feasible points of {A x <= b} (bounded instances)."""
    n = len(c)
    best = np.inf
    for rows in itertools.combinations(range(A.shape[0]), n):
        M = A[list(rows)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, b[list(rows)])
        if np.all(A @ x <= b + 1e-9):
            best = min(best, float(c @ x))
    return best


def _random_bounded_lp(rng, n, m):
    A = rng.normal(size=(m, n))
    b = rng.uniform(0.5, 2.0, m)  # x = 0 is strictly feasible
    box = np.vstack([np.eye(n), -np.eye(n)])
    return rng.normal(size=n), np.vstack([A, box]), np.r_[b, np.full(2 * n, 3.0)]


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        c, A, b = _random_bounded_lp(rng, n, int(rng.integers(1, 5)))
        sol = solve_lp(LpProblem(c, A, b, lb=np.full(n, -np.inf)))
        assert sol.status == OPTIMAL
        assert np.all(A @ sol.x <= b + 1e-7)
        assert sol.fun == pytest.approx(_vertex_optimum(c, A, b), abs=1e-6)


def test_random_lps_up_to_twelve_vars_match_highs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 13))
        c, A, b = _random_bounded_lp(rng, n, int(rng.integers(1, 2 * n + 2)))
        lb = rng.uniform(-3, 0, n)
        ours = solve_lp(LpProblem(c, A, b, lb=lb))
        ref = highs(c, A, b, lb=lb)
        assert ours.status == OPTIMAL and ref.status == 0
        assert ours.fun == pytest.approx(ref.fun, abs=1e-7)
        assert np.all(A @ ours.x <= b + 1e-7) and np.all(ours.x >= lb - 1e-7)


def test_repeat_solves_are_bit_identical():
    rng = np.random.default_rng(5)
    c, A, b = _random_bounded_lp(rng, 6, 9)
    a = solve_lp(LpProblem(c, A, b, lb=np.full(6, -np.inf)))
    z = solve_lp(LpProblem(c, A, b, lb=np.full(6, -np.inf)))
    assert np.array_equal(a.x, z.x) and a.iterations == z.iterations


def test_degenerate_lp_terminates():
    # many constraints through the optimum
    A = np.array([[1.0, 1.0], [1.0, 2.0], [2.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    b = np.array([1.0, 1.0, 1.0, 1.0, 1.0])
    sol = solve_lp(LpProblem(np.array([-1.0, -1.0]), A, b))
    assert sol.status == OPTIMAL
    assert sol.fun == pytest.approx(-2.0 / 3.0)
