"""Output-layer weight projection onto a box family of affine controllers.

Only the last layer ``(W, b)`` of a network is rewritten.  On every linear
region of the network over ``q`` the hidden stack is affine,
``h(x) = A_i x + c_i``, so the region's affine piece is
``K'_i = W A_i`` and ``b'_i = W c_i + b``: linear in the output weights.
Requiring each piece to lie in the family box is therefore a set of linear
constraints, and the change of the output over ``q`` is bounded by

    max_{x in vertices}  sum_ij |dW_ij| h_j(x) + sum_i |db_i|

because ``h >= 0``.  Minimizing that bound is an LP in epigraph form with
auxiliary variables ``s >= |dW|``, ``v >= |db|`` and ``t``.  A second LP with
``t`` fixed at its optimum minimizes ``sum(s) + sum(v)`` so ties resolve
deterministically (and a net already in the family is returned unchanged).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .grid import Box
from .lp import INFEASIBLE, OPTIMAL, LpNumericalError, LpProblem, LpSolution, solve_lp
from .numeric import TOL
from .relunet import CpwaMap, ReluNet, cpwa_vertices, enumerate_regions, hidden_eval

log = logging.getLogger(__name__)

__all__ = [
    "LpProblem",
    "LpSolution",
    "solve_lp",
    "MembershipReport",
    "ProjectionProblem",
    "ProjectionResult",
    "ProjectionInfeasible",
    "check_membership",
    "project_output_layer",
    "project_net",
    "output_change_bound",
]


class ProjectionInfeasible(RuntimeError):
    """No output layer places every region's affine piece inside the family."""


@dataclass
class MembershipReport:
    ok: bool
    violating: list  # (region index, max violation)
    regions: int

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class ProjectionProblem:
    net: ReluNet
    q: Box
    family: Box
    cpwa: CpwaMap
    vertices: np.ndarray

    @classmethod
    def build(cls, net: ReluNet, q: Box, family: Box, cpwa: CpwaMap | None = None) -> "ProjectionProblem":
        cpwa = enumerate_regions(net, q) if cpwa is None else cpwa
        expected = net.m * (net.n + 1)
        if family.dim != expected:
            raise ValueError(f"family has {family.dim} parameters, a {net.m}x{net.n} affine law needs {expected}")
        return cls(net, q, family, cpwa, cpwa_vertices(cpwa))


@dataclass
class ProjectionResult:
    net: ReluNet
    W: np.ndarray
    b: np.ndarray
    objective: float
    changed: bool
    lp_iterations: int = 0


def check_membership(net: ReluNet, q: Box, family: Box, cpwa: CpwaMap | None = None,
                     tol: float = TOL.membership) -> MembershipReport:
    cpwa = enumerate_regions(net, q) if cpwa is None else cpwa
    bad = []
    for i, reg in enumerate(cpwa.regions):
        theta = reg.piece.flat()
        viol = max(float(np.max(family.lo - theta)), float(np.max(theta - family.hi)))
        if viol > tol:
            bad.append((i, viol))
    return MembershipReport(not bad, bad, len(cpwa.regions))


def _build_lp(prob: ProjectionProblem):
    """Variable layout: [W_hat (m*o), b_hat (m), s (m*o), v (m), t]."""
    net = prob.net
    W, b = net.output
    m, o = W.shape
    n = net.n
    nW, nb = m * o, m
    iW = np.arange(nW)
    ib = nW + np.arange(nb)
    i_s = nW + nb + np.arange(nW)
    iv = 2 * nW + nb + np.arange(nb)
    it = 2 * nW + 2 * nb
    nvar = it + 1
    rows, rhs = [], []

    H = hidden_eval(net, prob.vertices)  # (V, o)
    for h in H:
        r = np.zeros(nvar)
        r[i_s] = np.tile(h, m)  # s_ij h_j, row-major over (i, j)
        r[iv] = 1.0
        r[it] = -1.0
        rows.append(r)
        rhs.append(0.0)

    Wf = W.ravel()
    for k in range(nW):
        r = np.zeros(nvar); r[iW[k]] = 1.0; r[i_s[k]] = -1.0; rows.append(r); rhs.append(Wf[k])
        r = np.zeros(nvar); r[iW[k]] = -1.0; r[i_s[k]] = -1.0; rows.append(r); rhs.append(-Wf[k])
    for k in range(nb):
        r = np.zeros(nvar); r[ib[k]] = 1.0; r[iv[k]] = -1.0; rows.append(r); rhs.append(b[k])
        r = np.zeros(nvar); r[ib[k]] = -1.0; r[iv[k]] = -1.0; rows.append(r); rhs.append(-b[k])

    lo, hi = prob.family.lo, prob.family.hi
    seen = set()
    for reg in prob.cpwa.regions:
        A_h, c_h = reg.hidden_A, reg.hidden_c  # (o, n), (o,)
        key = (A_h.tobytes(), c_h.tobytes())
        if key in seen:
            continue
        seen.add(key)
        for i in range(m):
            # parameter index of K'_{i,d} is i*(n+1)+d, of b'_i is i*(n+1)+n
            for d in range(n + 1):
                coef = np.zeros(nvar)
                if d < n:
                    coef[iW[i * o:(i + 1) * o]] = A_h[:, d]
                else:
                    coef[iW[i * o:(i + 1) * o]] = c_h
                    coef[ib[i]] = 1.0
                p = i * (n + 1) + d
                rows.append(coef.copy()); rhs.append(hi[p])
                rows.append(-coef); rhs.append(-lo[p])

    lb = np.full(nvar, -np.inf)
    lb[i_s] = 0.0
    lb[iv] = 0.0
    lb[it] = 0.0
    layout = dict(iW=iW, ib=ib, i_s=i_s, iv=iv, it=it, m=m, o=o)
    return np.array(rows), np.array(rhs), lb, layout


def project_output_layer(net: ReluNet, q: Box, family: Box, cpwa: CpwaMap | None = None) -> ProjectionResult:
    """Solve the projection LP; returns the new net, its output layer and the bound value."""
    prob = ProjectionProblem.build(net, q, family, cpwa)
    if check_membership(net, q, family, prob.cpwa).ok:
        W, b = net.output
        return ProjectionResult(net, np.array(W), np.array(b), 0.0, False)

    A, rhs, lb, L = _build_lp(prob)
    nvar = A.shape[1]
    c1 = np.zeros(nvar)
    c1[L["it"]] = 1.0
    sol = solve_lp(LpProblem(c1, A, rhs, lb=lb))
    if sol.status == INFEASIBLE:
        raise ProjectionInfeasible(
            "projection LP infeasible: no output layer realizes the family on every region "
            "(the family's K' box must admit a point reachable by all regions, e.g. contain 0)"
        )
    if sol.status != OPTIMAL:
        raise LpNumericalError(f"projection LP returned status {sol.status}")
    t_star = sol.fun
    # Lexicographic tie-break: fix t and minimize the l1 weight change.
    c2 = np.zeros(nvar)
    c2[L["i_s"]] = 1.0
    c2[L["iv"]] = 1.0
    ub = np.full(nvar, np.inf)
    ub[L["it"]] = t_star + 1e-9 * max(1.0, abs(t_star))
    sol2 = solve_lp(LpProblem(c2, A, rhs, lb=lb, ub=ub))
    if sol2.status != OPTIMAL:
        log.warning("secondary projection LP returned %s; keeping primary optimum", sol2.status)
        sol2 = sol
    z = sol2.x
    W_new = z[L["iW"]].reshape(L["m"], L["o"])
    b_new = z[L["ib"]]
    new = net.with_output(W_new, b_new)
    return ProjectionResult(new, W_new, b_new, float(t_star), True, sol.iterations + sol2.iterations)


def project_net(net: ReluNet, q: Box, family: Box) -> ReluNet:
    return project_output_layer(net, q, family).net


def output_change_bound(before: ReluNet, after: ReluNet, q: Box, cpwa: CpwaMap | None = None) -> float:
    if len(before.layers) != len(after.layers) or not all(
        np.array_equal(W1, W2) and np.array_equal(b1, b2)
        for (W1, b1), (W2, b2) in zip(before.hidden, after.hidden)
    ):
        raise ValueError("nets must share all hidden layers")
    cpwa = enumerate_regions(before, q) if cpwa is None else cpwa
    V = cpwa_vertices(cpwa)
    H = hidden_eval(before, V)
    dW = np.abs(after.output[0] - before.output[0])
    db = np.abs(after.output[1] - before.output[1])
    vals = (H @ dW.T).sum(axis=1) + db.sum()
    return float(vals.max())
