"""Finite abstraction of the closed loop, its product with a DFA, and backward DP.

Row ``r = q * M + P`` of the abstraction holds the distribution of the next
cell when the partition-center affine law of ``P`` is applied at the center of
cell ``q``.  Column ``N`` is the sink.  The sink itself is absorbing and has
no stored row.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .grid import ControllerGrid, StateGrid
from .kernel import StochasticKernel, interval_mass, kernel_moments
from .numeric import TOL
from .spec.automaton import Dfa

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-9


class AbstractionError(RuntimeError):
    pass


class LabelMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SymbolicMdp:
    N: int
    M: int
    indptr: np.ndarray  # (N*M + 1,)
    indices: np.ndarray  # successor cells, N is the sink
    data: np.ndarray
    available: np.ndarray  # (N, M) bool; rows outside it are empty
    state_grid_hash: str = ""
    controller_grid_hash: str = ""
    initial: np.ndarray | None = None  # optional initial cells

    @property
    def sink(self) -> int:
        return self.N

    def row(self, q: int, P: int) -> tuple[np.ndarray, np.ndarray]:
        r = q * self.M + P
        a, b = self.indptr[r], self.indptr[r + 1]
        return self.indices[a:b], self.data[a:b]

    def prob(self, q: int, P: int, q2: int) -> float:
        idx, pr = self.row(q, P)
        hit = idx == q2
        return float(pr[hit].sum())

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.N * self.M, self.N + 1))

    def dense(self) -> np.ndarray:
        """``(N, M, N + 1)`` transition array; for small instances."""
        return self.matrix().toarray().reshape(self.N, self.M, self.N + 1)

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(np.append(self.data, 0.0), self.indptr[:-1]) * (np.diff(self.indptr) > 0)

    def check(self, tol: float = ROW_SUM_TOL) -> None:
        if np.any(self.data < 0):
            raise AbstractionError("negative transition probability")
        sums = self.row_sums().reshape(self.N, self.M)
        bad = self.available & (np.abs(sums - 1.0) > tol)
        if bad.any():
            q, P = map(int, np.argwhere(bad)[0])
            raise AbstractionError(f"row (q={q}, P={P}) sums to {sums[q, P]!r}")

    @classmethod
    def from_dense(cls, T, available=None, **kw) -> "SymbolicMdp":
        T = np.asarray(T, dtype=float)
        N, M, N1 = T.shape
        if N1 != N + 1:
            raise ValueError("dense table must be (N, M, N + 1) including the sink column")
        avail = np.ones((N, M), dtype=bool) if available is None else np.asarray(available, dtype=bool)
        T = T * avail[:, :, None]
        A = sp.csr_matrix(T.reshape(N * M, N + 1))
        A.sort_indices()
        return cls(N, M, A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.copy(), avail, **kw)

    # --- file format: JSON header line, then "q,P,q2,prob" triplets --------

    def save(self, path) -> None:
        header = {
            "format": "neurosym-mdp/1",
            "N": self.N,
            "M": self.M,
            "state_grid": self.state_grid_hash,
            "controller_grid": self.controller_grid_hash,
            "available": np.flatnonzero(self.available.ravel()).tolist(),
            "initial": None if self.initial is None else [int(i) for i in self.initial],
        }
        buf = io.StringIO()
        buf.write(json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for r in range(self.N * self.M):
            q, P = divmod(r, self.M)
            for k in range(self.indptr[r], self.indptr[r + 1]):
                w.writerow([q, P, int(self.indices[k]), repr(float(self.data[k]))])
        Path(path).write_text(buf.getvalue())

    @classmethod
    def load(cls, path) -> "SymbolicMdp":
        with open(path) as fh:
            header = json.loads(fh.readline())
            rows = [(int(a), int(b), int(c), float(d)) for a, b, c, d in csv.reader(fh)]
        N, M = header["N"], header["M"]
        avail = np.zeros(N * M, dtype=bool)
        avail[header["available"]] = True
        T = sp.coo_matrix(
            ([r[3] for r in rows], ([r[0] * M + r[1] for r in rows], [r[2] for r in rows])),
            shape=(N * M, N + 1),
        ).tocsr()
        T.sort_indices()
        init = header.get("initial")
        return cls(N, M, T.indptr.astype(np.int64), T.indices.astype(np.int64), T.data.copy(),
                   avail.reshape(N, M), header.get("state_grid", ""), header.get("controller_grid", ""),
                   None if init is None else np.asarray(init, dtype=np.int64))


# --- abstraction -------------------------------------------------------------

def partition_laws(state_grid: StateGrid, controller_grid: ControllerGrid, m: int):
    """Partition-center affine laws ``K' (M, m, n)`` and ``b' (M, m)``."""
    n = state_grid.dim
    theta = controller_grid.centers()
    if theta.shape[1] != m * (n + 1):
        raise ValueError(f"controller grid has {theta.shape[1]} parameters, expected m*(n+1) = {m * (n + 1)}")
    T = theta.reshape(-1, m, n + 1)
    return T[:, :, :n], T[:, :, n]


def _dim_masses(edges: np.ndarray, periodic: bool, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Probability of each cell interval along one dimension, shape ``(B, cells)``."""
    lo, hi = edges[:-1][None, :], edges[1:][None, :]
    mu, sd = mean[:, None], std[:, None]
    if not periodic:
        return interval_mass(lo, hi, mu, sd)
    period = edges[-1] - edges[0]
    mu = edges[0] + np.mod(mu - edges[0], period)
    K = int(np.ceil(10.0 * float(np.max(std)) / period)) + 1
    out = np.zeros((mean.shape[0], edges.size - 1))
    for k in range(-K, K + 1):
        out += interval_mass(lo + k * period, hi + k * period, mu, sd)
    return np.minimum(out, 1.0)


def _rows_distribution(grid: StateGrid, mean: np.ndarray, std: np.ndarray, prune: float):
    """Sparse successor distributions for a batch of rows.

    Returns per-row lists as flat arrays ``(row_id, cell, prob)``; sink mass is
    appended per row.
    """
    B, n = mean.shape
    counts = grid.counts
    windows, starts, widths = [], [], []
    for d in range(n):
        w = _dim_masses(grid.edges[d], bool(grid.periodic[d]), mean[:, d], std[:, d])
        w[w < prune] = 0.0
        if grid.periodic[d]:
            windows.append(w)
            starts.append(np.zeros(B, dtype=np.int64))
            widths.append(int(counts[d]))
            continue
        nz = w > 0
        any_nz = nz.any(axis=1)
        first = np.where(any_nz, np.argmax(nz, axis=1), 0)
        last = np.where(any_nz, counts[d] - 1 - np.argmax(nz[:, ::-1], axis=1), 0)
        width = int(np.max(last - first + 1)) if any_nz.any() else 1
        offs = first[:, None] + np.arange(width)[None, :]
        valid = offs < counts[d]
        win = np.where(valid, np.take_along_axis(w, np.minimum(offs, counts[d] - 1), axis=1), 0.0)
        win[~any_nz] = 0.0
        windows.append(win)
        starts.append(first)
        widths.append(width)
    # joint probabilities over the windowed product
    joint = windows[0]
    for d in range(1, n):
        joint = (joint[:, :, None] * windows[d][:, None, :]).reshape(B, -1)
    grids = np.meshgrid(*[np.arange(wd) for wd in widths], indexing="ij")
    offs = [g.ravel() for g in grids]
    cells = np.zeros((B, joint.shape[1]), dtype=np.int64)
    inside = np.ones((B, joint.shape[1]), dtype=bool)
    stride = 1
    for d in reversed(range(n)):
        idx = starts[d][:, None] + offs[d][None, :]
        inside &= idx < counts[d]
        cells += np.minimum(idx, counts[d] - 1) * stride
        stride *= int(counts[d])
    keep = inside & (joint >= prune)
    rid, col = np.nonzero(keep)
    probs = joint[rid, col]
    cells = cells[rid, col]
    kept = np.bincount(rid, weights=probs, minlength=B)
    over = kept > 1.0
    if over.any():
        probs = probs / np.where(over, kept, 1.0)[rid]
        kept = np.minimum(kept, 1.0)
    sink = np.maximum(0.0, 1.0 - kept)
    srow = np.flatnonzero(sink > 0)
    rid = np.concatenate([rid, srow])
    cells = np.concatenate([cells, np.full(srow.size, grid.size, dtype=np.int64)])
    probs = np.concatenate([probs, sink[srow]])
    order = np.lexsort((cells, rid))
    return rid[order], cells[order], probs[order]


def build_mdp(state_grid: StateGrid, controller_grid: ControllerGrid, kernel: StochasticKernel,
              available=None, prune: float = TOL.prune, chunk: int = 512, initial=None) -> SymbolicMdp:
    """Abstraction rows for every ``(q, P)`` (or only those marked in ``available``)."""
    n, m = kernel.nominal.n, kernel.nominal.m
    if state_grid.dim != n:
        raise ValueError(f"state grid has dimension {state_grid.dim}, kernel expects {n}")
    K, b = partition_laws(state_grid, controller_grid, m)
    N, M = state_grid.size, controller_grid.size
    avail = np.ones((N, M), dtype=bool) if available is None else np.asarray(available, dtype=bool)
    if avail.shape != (N, M):
        raise ValueError(f"availability mask must be {(N, M)}")
    Z = state_grid.centers()
    rows = np.flatnonzero(avail.ravel())
    counts = np.zeros(N * M, dtype=np.int64)
    parts_idx, parts_p = [], []
    for a in range(0, rows.size, chunk):
        r = rows[a:a + chunk]
        q, P = np.divmod(r, M)
        z = Z[q]
        u = np.einsum("bij,bj->bi", K[P], z) + b[P]
        try:
            mean, std = kernel_moments(kernel, z, u)
            mean, std = np.atleast_2d(mean), np.atleast_2d(std)
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std)) and np.all(std > 0)):
                raise FloatingPointError("non-finite or non-positive kernel moments")
        except Exception as e:
            bad = _first_failing(kernel, z, u)
            where = f"(q={int(q[bad])}, P={int(P[bad])})" if bad is not None else f"rows {int(r[0])}..{int(r[-1])}"
            raise AbstractionError(f"kernel evaluation failed at {where}: {e}") from e
        rid, cells, probs = _rows_distribution(state_grid, mean, std, prune)
        counts[r] = np.bincount(rid, minlength=r.size)
        parts_idx.append(cells)
        parts_p.append(probs)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(parts_idx) if parts_idx else np.zeros(0, dtype=np.int64)
    data = np.concatenate(parts_p) if parts_p else np.zeros(0)
    mdp = SymbolicMdp(N, M, indptr, indices, data, avail, state_grid.content_hash(),
                      controller_grid.content_hash(), None if initial is None else np.asarray(initial, dtype=np.int64))
    mdp.check()
    return mdp


def _first_failing(kernel, z, u):
    for i in range(z.shape[0]):
        try:
            mean, std = kernel_moments(kernel, z[i], u[i])
            if not (np.all(np.isfinite(mean)) and np.all(std > 0)):
                return i
        except Exception:
            return i
    return None


# --- product -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProductMdp:
    mdp: SymbolicMdp
    dfa: Dfa
    letters: np.ndarray  # (N + 1,) DFA letter of every cell, sink last
    next_s: np.ndarray = field(repr=False)  # (N + 1, Z): DFA state after entering q2 from s

    @property
    def Z(self) -> int:
        return self.dfa.n_states

    @property
    def n_states(self) -> int:
        return (self.mdp.N + 1) * self.Z

    def index(self, q: int, s: int) -> int:
        return q * self.Z + s

    def accepting(self, q: int, s: int) -> bool:
        return bool(self.dfa.accepting[s])

    def initial_state(self, q0: int) -> tuple[int, int]:
        """Product state for a start in cell ``q0``: the DFA reads the start cell's label."""
        return q0, int(self.dfa.delta[self.dfa.initial, self.letters[q0]])

    def transition_row(self, q: int, s: int, P: int) -> list[tuple[tuple[int, int], float]]:
        if q == self.mdp.sink:
            return [((q, s), 1.0)]
        idx, pr = self.mdp.row(q, P)
        return [((int(q2), int(self.next_s[q2, s])), float(p)) for q2, p in zip(idx, pr)]

    def dense(self) -> np.ndarray:
        """``(S, M, S)`` product transition array with ``S = (N + 1) Z``; for small instances."""
        N, M, Z = self.mdp.N, self.mdp.M, self.Z
        T = np.zeros((self.n_states, M, self.n_states))
        for q in range(N + 1):
            for s in range(Z):
                for P in range(M):
                    if q < N and not self.mdp.available[q, P]:
                        continue
                    for (q2, s2), p in self.transition_row(q, s, P):
                        T[self.index(q, s), P, self.index(q2, s2)] += p
        return T


def build_product(mdp: SymbolicMdp, dfa: Dfa, labeling: Sequence, ap: Sequence[str] | None = None) -> ProductMdp:
    """``labeling[q]`` is the set of propositions of cell ``q``; the sink defaults to the empty set."""
    labels = list(labeling)
    if len(labels) == mdp.N:
        labels.append(frozenset())
    if len(labels) != mdp.N + 1:
        raise LabelMismatch(f"{len(labels)} labels for {mdp.N} cells")
    if ap is not None:
        missing = set(dfa.atoms) - set(ap)
        if missing:
            raise LabelMismatch(f"formula atoms {sorted(missing)} are not labeling propositions")
        extra = set().union(*labels) - set(ap)
        if extra:
            raise LabelMismatch(f"labels use unknown propositions {sorted(extra)}")
    letters = np.array([dfa.letter(L) for L in labels], dtype=np.int64)
    next_s = dfa.delta[:, letters].T.copy()
    return ProductMdp(mdp, dfa, letters, next_s)


# --- dynamic programming -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DpResult:
    V: np.ndarray  # (H + 1, N + 1, Z)
    Gamma: np.ndarray  # (H, N + 1, Z) partition index, -1 where nothing is activated
    H: int

    def value(self, q: int, s: int, k: int = 0) -> float:
        return float(self.V[k, q, s])

    def activation(self, k: int, q: int, s: int) -> int:
        return int(self.Gamma[k, q, s])

    def save(self, path) -> None:
        arrays = {f"V_{k}": self.V[k].ravel() for k in range(self.H + 1)}
        arrays.update({f"Gamma_{k}": self.Gamma[k].ravel() for k in range(self.H)})
        np.savez_compressed(path, shape=np.array(self.V.shape[1:]), H=np.array(self.H), **arrays)

    @classmethod
    def load(cls, path) -> "DpResult":
        with np.load(path) as z:
            shape, H = tuple(z["shape"]), int(z["H"])
            V = np.stack([z[f"V_{k}"].reshape(shape) for k in range(H + 1)])
            G = np.stack([z[f"Gamma_{k}"].reshape(shape) for k in range(H)]) if H else np.zeros((0,) + shape, int)
        return cls(V, G, H)


def dp_solve(product: ProductMdp, H: int) -> DpResult:
    """Backward recursion for the maximal probability of reaching ``cells x G`` within ``H`` steps."""
    if H < 1:
        raise ValueError("horizon must be at least 1")
    mdp, dfa = product.mdp, product.dfa
    N, M, Z = mdp.N, mdp.M, product.Z
    goal = dfa.accepting.astype(float)
    done = dfa.accepting | dfa.trap
    rows = np.flatnonzero(mdp.available.ravel())
    q_of = rows // M
    T = mdp.matrix()[rows]
    starts = np.flatnonzero(np.r_[True, q_of[1:] != q_of[:-1]]) if rows.size else np.zeros(0, dtype=np.int64)
    q_groups = q_of[starts]
    V = np.zeros((H + 1, N + 1, Z))
    Gamma = np.full((H, N + 1, Z), -1, dtype=np.int64)
    V[H] = goal[None, :]
    for k in range(H - 1, -1, -1):
        W = np.take_along_axis(V[k + 1], product.next_s, axis=1)  # W[q2, s] = V_{k+1}(q2, next_s[q2, s])
        Vk = np.zeros((N + 1, Z))
        Vk[N] = goal  # sink keeps its DFA state forever
        if rows.size:
            Q = np.asarray(T @ W)  # (R, Z)
            best = np.maximum.reduceat(Q, starts, axis=0)
            Vk[q_groups] = best
            # lowest partition index among the maximizers
            hit = Q == best[np.repeat(np.arange(starts.size), np.diff(np.r_[starts, rows.size]))]
            P_of = rows % M
            for s in range(Z):
                idx = np.flatnonzero(hit[:, s])
                first = np.unique(q_of[idx], return_index=True)
                Gamma[k, first[0], s] = P_of[idx[first[1]]]
        Vk[:, dfa.accepting] = 1.0
        Gamma[k][:, done] = -1
        Gamma[k, N] = -1
        V[k] = np.clip(Vk, 0.0, 1.0)
    return DpResult(V, Gamma, H)


__all__ = [
    "AbstractionError",
    "DpResult",
    "LabelMismatch",
    "ProductMdp",
    "SymbolicMdp",
    "build_mdp",
    "build_product",
    "dp_solve",
    "partition_laws",
]
