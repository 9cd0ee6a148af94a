"""Error terms relating abstract values to closed-loop satisfaction probabilities.

Every quantity here is reporting only; nothing gates planning.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import Box, ControllerGrid, StateGrid
from .kernel import StochasticKernel, kernel_moments
from .relunet import lipschitz_on

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class BoundParams:
    Lambda: np.ndarray  # per cell: integrated state-Lipschitz constant of the kernel
    B: np.ndarray  # per cell: integrated action-Lipschitz constant
    L: np.ndarray  # per cell: Lipschitz constant of the deployed net
    LX: float  # sup of |x| over the domain
    LP: float  # sup of |K'| over the controller box
    eta_q: float
    eta_P: float
    H: int
    Z: int
    m: int
    n: int
    N: int = field(default=0)

    def __post_init__(self):
        for name in ("Lambda", "B", "L"):
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, a)
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite and nonnegative")
        sizes = {self.Lambda.size, self.B.size, self.L.size}
        if len(sizes) != 1:
            raise ValueError("per-cell arrays must have equal length")
        if self.N == 0:
            object.__setattr__(self, "N", self.Lambda.size)
        for name in ("LX", "LP", "eta_q", "eta_P"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("H", "Z", "m", "n", "N"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("Lambda", "B", "L"):
            d[k] = getattr(self, k).tolist()
        return d


def delta_nn_terms(p: BoundParams) -> np.ndarray:
    c = math.sqrt(p.m * (p.n + 1))
    return p.Lambda * p.eta_q + p.B * p.L * p.eta_q + c * p.LX * p.B * p.eta_P


def delta_star_terms(p: BoundParams) -> np.ndarray:
    c = math.sqrt(p.m * (p.n + 1))
    return p.Lambda * p.eta_q + p.B * p.LP * p.eta_q + 2.0 * c * p.LX * p.B * p.eta_P


def delta_nn(p: BoundParams) -> tuple[float, int]:
    """Worst per-cell error of the trained-net closed loop, and the cell attaining it."""
    t = delta_nn_terms(p)
    i = int(np.argmax(t))
    return float(t[i]), i


def delta_star(p: BoundParams) -> tuple[float, int]:
    t = delta_star_terms(p)
    i = int(np.argmax(t))
    return float(t[i]), i


def satisfaction_envelope(v0: float, p: BoundParams) -> tuple[float, float]:
    if not 0.0 <= v0 <= 1.0:
        raise ValueError("value must lie in [0, 1]")
    eps = p.H * p.Z * delta_nn(p)[0]
    return max(0.0, v0 - eps), min(1.0, v0 + eps)


def guarantee_threshold(p: BoundParams) -> float:
    """Slack ``H Z delta_nn`` to subtract from an abstract value for a certified lower bound."""
    return p.H * p.Z * delta_nn(p)[0]


def gaussian_kernel_lipschitz(sigma, mean_lipschitz_x: float, mean_lipschitz_u: float,
                              sigma_floor: float = 0.0) -> tuple[float, float]:
    """Integrated Lipschitz constants of a diagonal Gaussian kernel with fixed covariance.

    A mean shift ``d`` moves the density by at most ``sqrt(2/pi) |d| / sigma_min`` in L1,
    so the constants are that factor times the mean map's Lipschitz constants.
    """
    s = float(np.min(np.asarray(sigma, dtype=float)))
    if s <= 0 or s < sigma_floor:
        raise ValueError(f"std {s} is below the floor {sigma_floor}")
    if mean_lipschitz_x < 0 or mean_lipschitz_u < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    k = SQRT_2_OVER_PI / s
    return k * mean_lipschitz_x, k * mean_lipschitz_u


def mean_lipschitz_fd(kernel: StochasticKernel, cell: Box, u_box: Box, samples: int = 64,
                      h: float = 1e-5, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Finite-difference estimate of the mean map's Lipschitz constants over a cell (spectral norms)."""
    rng = np.random.default_rng(0) if rng is None else rng
    X = cell.sample(rng, samples)
    U = u_box.sample(rng, samples)
    n, m = X.shape[1], U.shape[1]
    Lx = Lu = 0.0
    for x, u in zip(X, U):
        Jx = np.empty((n, n))
        Ju = np.empty((n, m))
        for j in range(n):
            e = np.zeros(n); e[j] = h
            Jx[:, j] = (kernel_moments(kernel, x + e, u)[0] - kernel_moments(kernel, x - e, u)[0]) / (2 * h)
        for j in range(m):
            e = np.zeros(m); e[j] = h
            Ju[:, j] = (kernel_moments(kernel, x, u + e)[0] - kernel_moments(kernel, x, u - e)[0]) / (2 * h)
        Lx = max(Lx, float(np.linalg.norm(Jx, 2)))
        Lu = max(Lu, float(np.linalg.norm(Ju, 2)))
    return Lx, Lu


def grid_constants(state_grid: StateGrid, controller_grid: ControllerGrid, m: int) -> dict:
    """``eta_q`` (cell diameter), ``eta_P`` (largest partition width), ``LX`` and ``LP``."""
    n = state_grid.dim
    dom = state_grid.domain
    corners = np.maximum(np.abs(dom.lo), np.abs(dom.hi))
    cdom = controller_grid.domain
    K_lo = cdom.lo.reshape(m, n + 1)[:, :n]
    K_hi = cdom.hi.reshape(m, n + 1)[:, :n]
    return {
        "eta_q": float(np.linalg.norm(state_grid.widths)),
        "eta_P": float(np.max(controller_grid.widths)),
        "LX": float(np.linalg.norm(corners)),
        "LP": float(np.sqrt(np.sum(np.maximum(K_lo**2, K_hi**2)))),
    }


def estimate_params(task, Z: int, library=None, samples: int = 16,
                    rng: np.random.Generator | None = None) -> BoundParams:
    """Per-cell constants for a task: finite-difference mean Lipschitz constants through the
    Gaussian closed form, and each cell's largest stored-net Lipschitz constant (``LP`` when none)."""
    rng = np.random.default_rng(0) if rng is None else rng
    sg, cg = task.state_grid, task.controller_grid
    n, m = sg.dim, task.kernel.nominal.m
    consts = grid_constants(sg, cg, m)
    b_max = np.abs(cg.domain.lo).reshape(m, n + 1)[:, n]
    u_hi = np.maximum(b_max, np.abs(cg.domain.hi).reshape(m, n + 1)[:, n]) + consts["LP"] * consts["LX"]
    u_box = Box(-u_hi, u_hi + 1e-12)
    sigma = task.kernel.floor()
    by_cell: dict = {}
    if library is not None:
        for (q, _), net in library.entries.items():
            by_cell.setdefault(q, []).append(net)
    Lam, Bs, Ls = [], [], []
    for q in range(sg.size):
        cell = sg.cell_box(q)
        lx, lu = mean_lipschitz_fd(task.kernel, cell, u_box, samples=samples, rng=rng)
        a, b = gaussian_kernel_lipschitz(sigma, lx, lu)
        Lam.append(a)
        Bs.append(b)
        Ls.append(max((lipschitz_on(net, cell) for net in by_cell.get(q, [])), default=consts["LP"]))
    return BoundParams(np.array(Lam), np.array(Bs), np.array(Ls), consts["LX"], consts["LP"], consts["eta_q"],
                       consts["eta_P"], task.H, Z, m, n)


def bound_report(v0: float, p: BoundParams) -> dict:
    dnn, cell_nn = delta_nn(p)
    dstar, cell_star = delta_star(p)
    lo, hi = satisfaction_envelope(v0, p)
    return {
        "delta_nn": dnn,
        "delta_star": dstar,
        "envelope": [lo, hi],
        "achieving_cell": {"delta_nn": cell_nn, "delta_star": cell_star},
        "value": v0,
        "params": p.to_json(),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1)
