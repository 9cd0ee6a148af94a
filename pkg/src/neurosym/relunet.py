"""Small fully connected ReLU networks and their piecewise-affine geometry.

A network is a stack of ``(W, b)`` layers; every layer but the last is
rectified.  On a box ``q`` the network is continuous piecewise affine, and
:func:`enumerate_regions` makes that explicit by searching activation patterns
neuron by neuron, pruning with an LP that certifies full-dimensional
feasibility (the Chebyshev-ball radius must exceed the feasibility slack).
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import Box
from .lp import OPTIMAL, LpProblem, solve_lp
from .numeric import TOL, CapabilityError

log = logging.getLogger(__name__)

MAX_HIDDEN_LAYERS = 2
MAX_HIDDEN_NEURONS = 16
MAX_VERTEX_DIM = 4
MAX_CORNER_DIM = 14  # a region equal to the whole cell has 2^n corners


@dataclass(frozen=True, eq=False)
class ReluNet:
    layers: tuple  # ((W, b), ...), last layer affine

    def __post_init__(self):
        fixed = []
        for k, (W, b) in enumerate(self.layers):
            W = np.atleast_2d(np.array(W, dtype=float))
            b = np.atleast_1d(np.array(b, dtype=float)).ravel()
            if W.shape[0] != b.size:
                raise ValueError(f"layer {k}: weight rows {W.shape[0]} != bias size {b.size}")
            if fixed and fixed[-1][0].shape[0] != W.shape[1]:
                raise ValueError(f"layer {k}: input width {W.shape[1]} != previous output {fixed[-1][0].shape[0]}")
            W.setflags(write=False)
            b.setflags(write=False)
            fixed.append((W, b))
        if not fixed:
            raise ValueError("a network needs at least one layer")
        object.__setattr__(self, "layers", tuple(fixed))

    @property
    def n(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def m(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden(self) -> tuple:
        return self.layers[:-1]

    @property
    def hidden_widths(self) -> list[int]:
        return [W.shape[0] for W, _ in self.hidden]

    @property
    def output(self) -> tuple:
        return self.layers[-1]

    def with_output(self, W, b) -> "ReluNet":
        return ReluNet(self.hidden + ((W, b),))

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ReluNet":
        net = cls(tuple((np.array(L["W"], dtype=float).reshape(len(L["b"]), -1), L["b"]) for L in d["layers"]))
        if net.n != d.get("n", net.n) or net.m != d.get("m", net.m):
            raise ValueError("serialized n/m disagree with layer shapes")
        return net

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def same_weights(self, other: "ReluNet") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )


def init_net(n: int, m: int, hidden=(6,), rng: np.random.Generator | None = None, scale: float = 0.1) -> ReluNet:
    """Uniform initialization in ``[-scale, scale]``."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = [n, *hidden, m]
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append((rng.uniform(-scale, scale, (b, a)), rng.uniform(-scale, scale, b)))
    return ReluNet(tuple(layers))


def _check_input(net: ReluNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != net.n:
        raise ValueError(f"input has dimension {X.shape[-1]}, network expects {net.n}")
    return X, single


def hidden_eval(net: ReluNet, x) -> np.ndarray:
    X, single = _check_input(net, x)
    for W, b in net.hidden:
        X = np.maximum(X @ W.T + b, 0.0)
    return X[0] if single else X


def eval(net: ReluNet, x) -> np.ndarray:  # noqa: A001 - mirrors the operation name
    X, single = _check_input(net, x)
    H = hidden_eval(net, X)
    W, b = net.output
    Y = H @ W.T + b
    return Y[0] if single else Y


@dataclass(frozen=True, eq=False)
class AffinePiece:
    K_prime: np.ndarray  # m x n
    b_prime: np.ndarray  # m

    def flat(self) -> np.ndarray:
        """Row-major ``[K'_row0, b'_0, K'_row1, b'_1, ...]`` parameter vector."""
        return np.hstack([self.K_prime, self.b_prime[:, None]]).ravel()

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.K_prime.T + self.b_prime


def params_to_piece(theta, m: int, n: int) -> AffinePiece:
    K = np.asarray(theta, dtype=float).reshape(m, n + 1)
    return AffinePiece(K[:, :n].copy(), K[:, n].copy())


@dataclass(frozen=True, eq=False)
class HPolytope:
    A: np.ndarray  # rows a_k
    c: np.ndarray  # a_k . x <= c_k

    def contains(self, x, tol: float = TOL.feasibility) -> bool:
        return bool(np.all(self.A @ np.asarray(x, dtype=float) <= self.c + tol))

    def contains_many(self, X, tol: float = TOL.feasibility) -> np.ndarray:
        return np.all(np.asarray(X) @ self.A.T <= self.c + tol, axis=1)


def box_polytope(q: Box) -> HPolytope:
    n = q.dim
    A = np.vstack([np.eye(n), -np.eye(n)])
    c = np.concatenate([q.hi, -q.lo])
    return HPolytope(A, c)


@dataclass(frozen=True, eq=False)
class Region:
    poly: HPolytope
    piece: AffinePiece
    pattern: tuple  # tuple of per-layer boolean tuples (True = active)
    hidden_A: np.ndarray  # last hidden layer is hidden_A @ x + hidden_c on this region
    hidden_c: np.ndarray


@dataclass(frozen=True, eq=False)
class CpwaMap:
    q: Box
    regions: tuple
    diagnostics: dict = field(default_factory=dict)

    def region_of(self, x) -> int:
        x = np.asarray(x, dtype=float)
        slack = [float(np.max(r.poly.A @ x - r.poly.c)) for r in self.regions]
        return int(np.argmin(slack))


def chebyshev_radius(A: np.ndarray, c: np.ndarray, cap: float = 1.0) -> tuple[float, np.ndarray | None]:
    """Largest ball radius inside ``{x : A x <= c}`` (capped), with its center."""
    n = A.shape[1]
    norms = np.linalg.norm(A, axis=1)
    obj = np.zeros(n + 1)
    obj[-1] = -1.0
    lb = np.full(n + 1, -np.inf)
    ub = np.full(n + 1, np.inf)
    lb[-1], ub[-1] = -1.0, cap
    sol = solve_lp(LpProblem(obj, np.hstack([A, norms[:, None]]), c, lb=lb, ub=ub))
    if sol.status != OPTIMAL:
        return -np.inf, None
    return float(sol.x[-1]), sol.x[:-1]


def check_limits(net: ReluNet) -> None:
    if len(net.hidden) > MAX_HIDDEN_LAYERS:
        raise CapabilityError(f"{len(net.hidden)} hidden layers exceed the enumeration limit of {MAX_HIDDEN_LAYERS}")
    total = sum(net.hidden_widths)
    if total > MAX_HIDDEN_NEURONS:
        raise CapabilityError(f"{total} hidden neurons exceed the enumeration limit of {MAX_HIDDEN_NEURONS}")


def _interval_range(a: np.ndarray, c0: float, q: Box) -> tuple[float, float]:
    lo = c0 + np.sum(np.where(a > 0, a * q.lo, a * q.hi))
    hi = c0 + np.sum(np.where(a > 0, a * q.hi, a * q.lo))
    return lo, hi


def enumerate_regions(net: ReluNet, q: Box) -> CpwaMap:
    check_limits(net)
    if q.dim != net.n:
        raise ValueError(f"box has dimension {q.dim}, network expects {net.n}")
    box = box_polytope(q)
    n = net.n
    diag = {"lp_calls": 0, "duplicate_hyperplanes": 0}
    cap = float(np.min(q.widths))

    # Duplicate first-layer hyperplanes (within tolerance) are reported; the
    # full-dimensionality filter merges their sign patterns automatically.
    if net.hidden:
        W1, b1 = net.hidden[0]
        rows = np.hstack([W1, b1[:, None]])
        nrm = np.linalg.norm(rows, axis=1)
        for i, j in itertools.combinations(range(rows.shape[0]), 2):
            if nrm[i] > 0 and nrm[j] > 0:
                u, v = rows[i] / nrm[i], rows[j] / nrm[j]
                if np.allclose(u, v, atol=TOL.geometry) or np.allclose(u, -v, atol=TOL.geometry):
                    diag["duplicate_hyperplanes"] += 1

    results = []

    def feasible(A, c) -> bool:
        diag["lp_calls"] += 1
        r, _ = chebyshev_radius(A, c, cap)
        return r > TOL.feasibility

    def descend(layer: int, j: int, A_in, c_in, cons_A, cons_c, pattern, current):
        # A_in x + c_in is the input to hidden layer `layer`; `current` collects
        # the active flags decided so far in this layer.
        if layer == len(net.hidden):
            W, b = net.output
            piece = AffinePiece(W @ A_in, W @ c_in + b)
            results.append(
                Region(HPolytope(np.array(cons_A), np.array(cons_c)), piece, tuple(pattern), A_in, c_in)
            )
            return
        W, b = net.hidden[layer]
        if j == W.shape[0]:
            mask = np.array(current, dtype=float)
            A_next = (W @ A_in) * mask[:, None]
            c_next = (W @ c_in + b) * mask
            descend(layer + 1, 0, A_next, c_next, cons_A, cons_c, pattern + [tuple(current)], [])
            return
        a = W[j] @ A_in
        c0 = float(W[j] @ c_in + b[j])
        lo, hi = _interval_range(a, c0, q)
        if lo >= 0.0:
            descend(layer, j + 1, A_in, c_in, cons_A, cons_c, pattern, current + [True])
            return
        if hi <= 0.0:
            descend(layer, j + 1, A_in, c_in, cons_A, cons_c, pattern, current + [False])
            return
        # active: a.x + c0 >= 0  <=>  -a.x <= c0 ; inactive: a.x <= -c0
        for active in (True, False):
            row, rhs = (-a, c0) if active else (a, -c0)
            A2 = cons_A + [row]
            c2 = cons_c + [rhs]
            if feasible(np.array(A2), np.array(c2)):
                descend(layer, j + 1, A_in, c_in, A2, c2, pattern, current + [active])

    descend(0, 0, np.eye(n), np.zeros(n), list(box.A), list(box.c), [], [])
    if diag["duplicate_hyperplanes"]:
        log.info("region enumeration: %d duplicate hyperplane pair(s) merged", diag["duplicate_hyperplanes"])
    return CpwaMap(q, tuple(results), diag)


def region_vertices(poly: HPolytope, tol: float = TOL.geometry, check_bounded: bool = True) -> np.ndarray:
    """All vertices of a bounded polytope by exhaustive n-subset intersection."""
    A, c = np.asarray(poly.A, dtype=float), np.asarray(poly.c, dtype=float)
    n = A.shape[1]
    if n > MAX_VERTEX_DIM:
        raise CapabilityError(f"vertex enumeration limited to dimension {MAX_VERTEX_DIM}, got {n}")
    subsets = np.array(list(itertools.combinations(range(A.shape[0]), n)), dtype=np.int64)
    if subsets.size == 0:
        raise ValueError("polytope has fewer halfspaces than dimensions (unbounded)")
    M = A[subsets]  # (S, n, n)
    rhs = c[subsets]
    det = np.linalg.det(M)
    scale = np.prod(np.linalg.norm(M, axis=2), axis=1)
    ok = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
    if not ok.any():
        raise ValueError("polytope has no vertices (unbounded or degenerate)")
    X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    feas = np.all(X @ A.T <= c + TOL.feasibility, axis=1)
    X = X[feas]
    if X.shape[0] == 0:
        raise ValueError("polytope is empty")
    # Deduplicate at the geometry tolerance (sort for determinism).
    X = X[np.lexsort(X.T[::-1])]
    keep = []
    for x in X:
        if not any(np.max(np.abs(x - y)) <= max(tol, 1e-9 * max(1.0, np.abs(x).max())) for y in keep):
            keep.append(x)
    V = np.array(keep)
    if check_bounded and not _is_bounded(A):
        raise ValueError("polytope is unbounded")
    return V


def _is_bounded(A: np.ndarray) -> bool:
    """Bounded iff no direction d != 0 has A d <= 0 (probed along each axis)."""
    n = A.shape[1]
    for sgn in (1.0, -1.0):
        for k in range(n):
            obj = np.zeros(n)
            obj[k] = -sgn
            sol = solve_lp(LpProblem(obj, A, np.zeros(A.shape[0]), lb=-np.ones(n), ub=np.ones(n)))
            if sol.status == OPTIMAL and -sol.fun > 1e-9:
                return False
    return True


def box_corners(q: Box) -> np.ndarray:
    pick = np.array(list(itertools.product((0, 1), repeat=q.dim)), dtype=bool)
    return np.where(pick, q.hi, q.lo)


def cpwa_vertices(cpwa: CpwaMap) -> np.ndarray:
    """Union of the vertices of every region (regions already lie inside q)."""
    n = cpwa.q.dim
    verts = []
    for r in cpwa.regions:
        if r.poly.c.size == 2 * n and n <= MAX_CORNER_DIM:
            verts.append(box_corners(cpwa.q))  # no hyperplane crosses the cell
        else:
            verts.append(region_vertices(r.poly, check_bounded=False))
    V = np.vstack(verts)
    V = V[np.lexsort(V.T[::-1])]
    keep = [V[0]]
    for x in V[1:]:
        if np.max(np.abs(x - keep[-1])) > TOL.geometry:
            keep.append(x)
    return np.array(keep)


def lipschitz_on(net: ReluNet, q: Box) -> float:
    cpwa = enumerate_regions(net, q)
    return max(float(np.linalg.norm(r.piece.K_prime, 2)) for r in cpwa.regions)
