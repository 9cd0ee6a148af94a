"""Dense two-phase simplex with Bland's pivoting rule.

Solves ``min c.z  s.t.  A_ub z <= b_ub,  A_eq z = b_eq,  lb <= z <= ub``.
Bland's rule makes the pivot sequence a deterministic function of the input, so
repeated solves are bit-reproducible and degenerate cycling cannot occur.
The problems solved here are small (tens of variables, a few hundred rows),
so a dense tableau is the simplest adequate representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numeric import TOL

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class LpNumericalError(RuntimeError):
    """The simplex iteration limit was hit or the tableau became inconsistent."""


@dataclass
class LpProblem:
    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None  # default 0
    ub: np.ndarray | None = None  # default +inf


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    fun: float | None = None
    iterations: int = 0
    info: dict = field(default_factory=dict)


def _as2d(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.asarray(A, dtype=float)
    return A.reshape(-1, n)


class _Tableau:
    """Standard-form tableau ``[A | b]`` with an explicit basis list."""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: list[int], tol: float):
        self.T = np.hstack([A, b[:, None]])
        self.basis = list(basis)
        self.tol = tol
        self.iterations = 0

    def pivot(self, r: int, e: int) -> None:
        T = self.T
        T[r] /= T[r, e]
        col = T[:, e].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = e
        self.iterations += 1

    def optimize(self, cost: np.ndarray, allowed: np.ndarray, max_iter: int) -> str:
        T = self.T
        tol = self.tol
        while True:
            if self.iterations > max_iter:
                raise LpNumericalError(f"simplex exceeded {max_iter} pivots")
            cb = cost[self.basis]
            reduced = cost - cb @ T[:, :-1]
            cand = np.flatnonzero((reduced < -tol) & allowed)
            if cand.size == 0:
                return OPTIMAL
            e = int(cand[0])  # Bland: lowest-index improving column
            colv = T[:, e]
            pos = colv > tol
            if not pos.any():
                return UNBOUNDED
            ratios = np.full(colv.shape, np.inf)
            ratios[pos] = T[pos, -1] / colv[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
            # Bland: among tied rows leave the lowest-index basic variable
            r = int(min(ties, key=lambda i: self.basis[i]))
            self.pivot(r, e)


def solve_lp(problem: LpProblem, tol: float | None = None, max_iter: int | None = None) -> LpSolution:
    tol = TOL.lp if tol is None else tol
    c = np.asarray(problem.c, dtype=float).ravel()
    n = c.size
    A_ub = _as2d(problem.A_ub, n)
    b_ub = np.asarray(problem.b_ub if problem.b_ub is not None else np.zeros(0), dtype=float).ravel()
    A_eq = _as2d(problem.A_eq, n)
    b_eq = np.asarray(problem.b_eq if problem.b_eq is not None else np.zeros(0), dtype=float).ravel()
    lb = np.zeros(n) if problem.lb is None else np.asarray(problem.lb, dtype=float).ravel()
    ub = np.full(n, np.inf) if problem.ub is None else np.asarray(problem.ub, dtype=float).ravel()
    for arr in (c, A_ub, b_ub, A_eq, b_eq):
        if not np.all(np.isfinite(arr)):
            raise ValueError("LP coefficients must be finite")
    if np.any(lb > ub):
        return LpSolution(INFEASIBLE)

    # Substitute z = offset + S y with y >= 0.
    cols = []  # (var index, sign)
    offset = np.zeros(n)
    extra_ub = []  # (column in y, bound)
    for j in range(n):
        if np.isfinite(lb[j]):
            offset[j] = lb[j]
            cols.append((j, 1.0))
            if np.isfinite(ub[j]):
                extra_ub.append((len(cols) - 1, ub[j] - lb[j]))
        elif np.isfinite(ub[j]):
            offset[j] = ub[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ny = len(cols)
    S = np.zeros((n, ny))
    for k, (j, sgn) in enumerate(cols):
        S[j, k] = sgn

    Aub_y = A_ub @ S
    bub_y = b_ub - A_ub @ offset
    if extra_ub:
        E = np.zeros((len(extra_ub), ny))
        for r, (k, bound) in enumerate(extra_ub):
            E[r, k] = 1.0
        Aub_y = np.vstack([Aub_y, E])
        bub_y = np.concatenate([bub_y, [bd for _, bd in extra_ub]])
    Aeq_y = A_eq @ S
    beq_y = b_eq - A_eq @ offset
    cy = S.T @ c
    const = float(c @ offset)

    m_ub, m_eq = Aub_y.shape[0], Aeq_y.shape[0]
    m = m_ub + m_eq
    if m == 0:
        if np.any(cy < -tol):
            return LpSolution(UNBOUNDED)
        return LpSolution(OPTIMAL, offset.copy(), const)

    # Rows: [Aub | I_slack | art] y ; equality rows have no slack.
    A = np.zeros((m, ny + m_ub))
    b = np.zeros(m)
    A[:m_ub, :ny] = Aub_y
    A[:m_ub, ny:] = np.eye(m_ub)
    b[:m_ub] = bub_y
    A[m_ub:, :ny] = Aeq_y
    b[m_ub:] = beq_y
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    need_art = np.array([neg[i] if i < m_ub else True for i in range(m)], dtype=bool)
    n_art = int(need_art.sum())
    nstd = ny + m_ub
    A_full = np.hstack([A, np.zeros((m, n_art))])
    basis = []
    a = 0
    for i in range(m):
        if need_art[i]:
            A_full[i, nstd + a] = 1.0
            basis.append(nstd + a)
            a += 1
        else:
            basis.append(ny + i)
    total = nstd + n_art
    limit = max_iter if max_iter is not None else 50 * (total + m) + 1000
    tab = _Tableau(A_full, b, basis, tol)

    if n_art:
        cost1 = np.zeros(total)
        cost1[nstd:] = 1.0
        tab.optimize(cost1, np.ones(total, dtype=bool), limit)
        phase1 = float(tab.T[:, -1] @ cost1[tab.basis])
        scale = max(1.0, float(np.abs(b).max()))
        if phase1 > 1e-7 * scale:
            return LpSolution(INFEASIBLE, iterations=tab.iterations, info={"phase1": phase1})
        # Drive remaining artificials out of the basis, dropping redundant rows.
        keep = []
        for r in range(m):
            if tab.basis[r] >= nstd:
                row = tab.T[r, :nstd]
                nz = np.flatnonzero(np.abs(row) > tol)
                if nz.size:
                    tab.pivot(r, int(nz[0]))
                    keep.append(r)
            else:
                keep.append(r)
        tab.T = tab.T[keep]
        tab.basis = [tab.basis[r] for r in keep]
        tab.T = np.hstack([tab.T[:, :nstd], tab.T[:, -1:]])

    cost2 = np.concatenate([cy, np.zeros(m_ub)])
    status = tab.optimize(cost2, np.ones(nstd, dtype=bool), limit)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, iterations=tab.iterations)
    y = np.zeros(nstd)
    for r, j in enumerate(tab.basis):
        y[j] = tab.T[r, -1]
    z = offset + S @ y[:ny]
    return LpSolution(OPTIMAL, z, float(c @ z), tab.iterations)
