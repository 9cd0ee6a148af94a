"""Shared numeric tolerances and error types."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    geometry: float = 1e-9  # vertex dedup, hyperplane intersection
    feasibility: float = 1e-8  # slack for "x satisfies a.x <= c"
    lp: float = 1e-9  # simplex pivot/ratio tolerance
    membership: float = 1e-7  # interval containment of affine pieces
    prune: float = 1e-12  # transition probabilities below this go to the sink
    std_floor: float = 1e-6


TOL = Tolerances()


class ConfigError(ValueError):
    """Invalid user configuration (maps to CLI exit code 2)."""


class CapabilityError(RuntimeError):
    """Request exceeds a documented size limit (maps to CLI exit code 3)."""
