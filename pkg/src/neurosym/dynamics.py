"""Dynamics presets: the Dubins car and the linear integrator chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import NominalDynamics

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DubinsParams:
    v: float = 0.3
    dt: float = 1.0

    def __post_init__(self):
        if not (self.v > 0 and self.dt > 0):
            raise ValueError("Dubins speed and time step must be positive")


def dubins_step(p: DubinsParams, x, u) -> np.ndarray:
    """State ``(x, y, theta)``, scalar turn rate ``u``; heading wrapped to [0, 2pi)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th = x[..., 2]
    w = u[..., 0] if u.ndim and u.shape[-1] == 1 else u
    out = np.empty(np.broadcast(th, w).shape + (3,))
    out[..., 0] = x[..., 0] + p.dt * p.v * np.cos(th)
    out[..., 1] = x[..., 1] + p.dt * p.v * np.sin(th)
    out[..., 2] = np.mod(th + p.dt * w, TWO_PI)
    return out


class _DubinsF:
    # picklable callable so library training can run in worker processes
    def __init__(self, p: DubinsParams):
        self.p = p

    def __call__(self, X, U):
        return dubins_step(self.p, X, U)


def dubins_dynamics(p: DubinsParams | None = None) -> NominalDynamics:
    p = DubinsParams() if p is None else p
    return NominalDynamics(_DubinsF(p), n=3, m=1, name=f"dubins(v={p.v},dt={p.dt})")


def default_input_matrix(n: int, m: int = 2) -> np.ndarray:
    """Unit input coupling into the first ``m`` coordinates."""
    B = np.zeros((n, m))
    for i in range(min(n, m)):
        B[i, i] = 1.0
    return B


def integrator_chain_step(n: int, x, u, B: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    B = default_input_matrix(n, u.shape[-1]) if B is None else np.asarray(B, dtype=float)
    if x.shape[-1] != n or B.shape != (n, u.shape[-1]):
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]} entries, B is {B.shape}, u has {u.shape[-1]}")
    return x + u @ B.T


class _ChainF:
    def __init__(self, n: int, B: np.ndarray):
        self.n, self.B = n, B

    def __call__(self, X, U):
        return integrator_chain_step(self.n, X, U, self.B)


def integrator_chain_dynamics(n: int, B: np.ndarray | None = None, m: int = 2) -> NominalDynamics:
    B = default_input_matrix(n, m) if B is None else np.asarray(B, dtype=float)
    return NominalDynamics(_ChainF(n, B), n=n, m=B.shape[1], name=f"integrator_chain(n={n})")
