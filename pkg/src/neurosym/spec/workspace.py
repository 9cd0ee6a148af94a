"""Named workspace regions and the labeling of cells and concrete states.

Regions are boxes over the leading (position) coordinates of the state.
Abstract labeling is conservative in both directions: an obstacle labels every
cell whose interior meets it, while goal and plain label regions only label
cells they fully contain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..grid import Box, UniformGrid
from ..numeric import TOL, ConfigError

REGION_TYPES = ("goal", "obstacle", "label")


@dataclass(frozen=True)
class Region:
    name: str
    type: str
    box: Box

    def __post_init__(self):
        if self.type not in REGION_TYPES:
            raise ConfigError(f"region {self.name!r}: type must be one of {REGION_TYPES}, got {self.type!r}")
        if not self.name.isidentifier():
            raise ConfigError(f"region name {self.name!r} is not a valid atom identifier")


@dataclass(frozen=True)
class Workspace:
    domain: Box  # position coordinates only
    regions: tuple

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate region names in workspace")
        for r in self.regions:
            if r.box.dim != self.domain.dim:
                raise ConfigError(f"region {r.name!r} has dimension {r.box.dim}, workspace has {self.domain.dim}")
            if np.any(r.box.lo < self.domain.lo - 1e-12) or np.any(r.box.hi > self.domain.hi + 1e-12):
                raise ConfigError(f"region {r.name!r} leaves the workspace domain")

    @property
    def names(self) -> tuple:
        return tuple(r.name for r in self.regions)

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def replace(self, **regions: Box) -> "Workspace":
        """Copy with the named regions moved to new boxes."""
        out = []
        for r in self.regions:
            out.append(Region(r.name, r.type, regions.pop(r.name)) if r.name in regions else r)
        if regions:
            raise KeyError(f"unknown regions {sorted(regions)}")
        return Workspace(self.domain, tuple(out))

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "regions": [{"name": r.name, "type": r.type, "box": r.box.to_json()} for r in self.regions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Workspace":
        try:
            dom = Box.from_json(d["domain"])
            regs = tuple(Region(r["name"], r["type"], Box.from_json(r["box"])) for r in d["regions"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed workspace JSON: {e}") from e
        return cls(dom, regs)

    @classmethod
    def load(cls, path) -> "Workspace":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def label_abstract(q: Box, ws: Workspace) -> frozenset:
    k = ws.domain.dim
    if q.dim < k:
        raise ConfigError(f"cell has {q.dim} dimensions, workspace needs {k}")
    lo, hi = q.lo[:k], q.hi[:k]
    eps = TOL.geometry  # grid edges and region edges computed by different float paths
    out = set()
    for r in ws.regions:
        if r.type == "obstacle":
            if np.all(lo < r.box.hi - eps) and np.all(r.box.lo + eps < hi):
                out.add(r.name)
        elif np.all(lo >= r.box.lo - eps) and np.all(hi <= r.box.hi + eps):
            out.add(r.name)
    return frozenset(out)


def label_concrete(x, ws: Workspace) -> frozenset:
    x = np.asarray(x, dtype=float)
    k = ws.domain.dim
    if x.shape[-1] < k:
        raise ConfigError(f"state has {x.shape[-1]} dimensions, workspace needs {k}")
    p = x[:k]
    return frozenset(r.name for r in ws.regions if r.box.contains(p))


def label_grid(grid: UniformGrid, ws: Workspace) -> list[frozenset]:
    """Abstract label of every cell, with the sink (index ``N``) labeled empty."""
    return [label_abstract(grid.cell_box(i), ws) for i in range(grid.size)] + [frozenset()]
