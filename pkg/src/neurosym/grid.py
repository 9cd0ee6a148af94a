"""Uniform axis-aligned partitions of the state space and the controller-parameter space.

Cells are half-open boxes ``[lo, hi)`` except that the top face of the domain
folds into the last cell, so :func:`locate` is a total function.  Cells are
numbered in C order (last dimension varies fastest).  The index ``N`` is
reserved for the sink, which collects every state outside the domain.

A state dimension may be flagged periodic (e.g. a heading angle); coordinates in
such a dimension are wrapped into the domain instead of being sent to the sink.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric import ConfigError


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError(f"box bounds have mismatched shapes {lo.shape} and {hi.shape}")
        if not np.all(lo < hi):
            bad = int(np.argmax(~(lo < hi)))
            raise ConfigError(f"box dimension {bad}: lo={lo[bad]} is not below hi={hi[bad]}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, closed: bool = True) -> bool:
        x = np.asarray(x, dtype=float)
        if closed:
            return bool(np.all(x >= self.lo) and np.all(x <= self.hi))
        return bool(np.all(x >= self.lo) and np.all(x < self.hi))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.lo + rng.random(shape) * (self.hi - self.lo)

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        return cls(d["lo"], d["hi"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self) -> int:
        return hash((tuple(self.lo), tuple(self.hi)))

    def __repr__(self) -> str:
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def _cell_counts(domain: Box, widths: np.ndarray) -> np.ndarray:
    if widths.shape != domain.lo.shape:
        raise ConfigError(f"expected {domain.dim} cell widths, got {widths.size}")
    counts = np.empty(domain.dim, dtype=np.int64)
    for d in range(domain.dim):
        if not widths[d] > 0:
            raise ConfigError(f"dimension {d}: cell width must be positive, got {widths[d]}")
        ratio = (domain.hi[d] - domain.lo[d]) / widths[d]
        c = int(round(ratio))
        if c < 1 or abs(ratio - c) > 1e-9 * max(1.0, c):
            raise ConfigError(
                f"dimension {d}: extent {domain.hi[d] - domain.lo[d]!r} is not an integer multiple "
                f"of width {widths[d]!r}"
            )
        counts[d] = c
    return counts


@dataclass(frozen=True, eq=False)
class UniformGrid:
    domain: Box
    widths: np.ndarray
    counts: np.ndarray
    periodic: np.ndarray
    edges: tuple = field(repr=False)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def sink(self) -> int:
        return self.size

    def multi_index(self, index: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(index, tuple(self.counts)))

    def flat_index(self, multi: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(multi), tuple(self.counts)))

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.size:
            raise IndexError(f"cell index {index} is not a real cell (grid has {self.size} cells)")

    def cell_box(self, index: int) -> Box:
        self._check_index(index)
        mi = self.multi_index(index)
        lo = np.array([self.edges[d][i] for d, i in enumerate(mi)])
        hi = np.array([self.edges[d][i + 1] for d, i in enumerate(mi)])
        return Box(lo, hi)

    def center(self, index: int) -> np.ndarray:
        return self.cell_box(index).center

    def centers(self) -> np.ndarray:
        """All cell centers, shape ``(size, dim)``, in index order."""
        mids = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def wrap(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        if self.periodic.any():
            lo, ext = self.domain.lo, self.domain.hi - self.domain.lo
            wrapped = lo + np.mod(x - lo, ext)
            x = np.where(self.periodic, wrapped, x)
        return x

    def locate_many(self, xs) -> np.ndarray:
        xs = self.wrap(np.atleast_2d(np.asarray(xs, dtype=float)))
        if xs.shape[1] != self.dim:
            raise ValueError(f"state has dimension {xs.shape[1]}, grid has {self.dim}")
        out = np.zeros(xs.shape[0], dtype=np.int64)
        inside = np.ones(xs.shape[0], dtype=bool)
        stride = 1
        for d in reversed(range(self.dim)):
            col = xs[:, d]
            inside &= (col >= self.domain.lo[d]) & (col <= self.domain.hi[d])
            idx = np.searchsorted(self.edges[d], col, side="right") - 1
            idx = np.clip(idx, 0, self.counts[d] - 1)
            out += idx * stride
            stride *= int(self.counts[d])
        out[~inside] = self.sink
        return out

    def locate(self, x) -> int:
        return int(self.locate_many(np.asarray(x, dtype=float)[None, :])[0])

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "widths": self.widths.tolist(),
            "periodic": [bool(p) for p in self.periodic],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class StateGrid(UniformGrid):
    """Partition of the state space into abstract states ``0..N-1`` plus sink ``N``."""


class ControllerGrid(UniformGrid):
    """Partition of the flattened ``(K', b')`` parameter box into ``M`` partitions."""


def _build(cls, domain: Box, widths, periodic=None):
    widths = np.atleast_1d(np.asarray(widths, dtype=float)).copy()
    counts = _cell_counts(domain, widths)
    if periodic is None:
        periodic = np.zeros(domain.dim, dtype=bool)
    periodic = np.asarray(periodic, dtype=bool).copy()
    if periodic.shape != (domain.dim,):
        raise ConfigError(f"periodic mask must have {domain.dim} entries")
    # Edges from exact multiples keep neighbouring cells bitwise consistent.
    edges = tuple(
        np.concatenate([domain.lo[d] + widths[d] * np.arange(counts[d]), [domain.hi[d]]])
        for d in range(domain.dim)
    )
    for a in (widths, counts, periodic):
        a.setflags(write=False)
    return cls(domain=domain, widths=widths, counts=counts, periodic=periodic, edges=edges)


def build_state_grid(domain: Box, eta_q, periodic=None) -> StateGrid:
    return _build(StateGrid, domain, eta_q, periodic)


def build_controller_grid(domain: Box, eta_P) -> ControllerGrid:
    return _build(ControllerGrid, domain, eta_P, None)


def locate(grid: UniformGrid, x) -> int:
    return grid.locate(x)


def center(grid: UniformGrid, index: int) -> np.ndarray:
    return grid.center(index)


def grid_from_json(d: dict, cls=StateGrid) -> UniformGrid:
    return _build(cls, Box.from_json(d["domain"]), d["widths"], d.get("periodic"))
