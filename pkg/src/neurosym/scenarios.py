"""Ready-made tasks: the desk-scale Dubins reach-avoid problem and small benchmark instances."""

from __future__ import annotations

import numpy as np

from .dynamics import DubinsParams, dubins_dynamics, integrator_chain_dynamics
from .grid import Box, build_controller_grid, build_state_grid
from .kernel import NominalDynamics, StochasticKernel
from .runtime import Task
from .spec.workspace import Region, Workspace

TWO_PI = 2.0 * np.pi

DESK_SIZE = 1.5
DESK_STD = (0.06, 0.06, 0.15)
DESK_SPEC = "!obs U[0,20] goal"


def desk_workspace(moved: bool = False) -> Workspace:
    """Goal in the upper-right quadrant; the obstacle blocks the lower middle (or, moved, the left middle)."""
    obs = Box([0.0, 0.6], [0.6, 0.9]) if moved else Box([0.6, 0.0], [0.9, 0.6])
    return Workspace(
        Box([0.0, 0.0], [DESK_SIZE, DESK_SIZE]),
        (Region("goal", "goal", Box([0.9, 0.9], [1.5, 1.5])), Region("obs", "obstacle", obs)),
    )


def desk_task(moved: bool = False, partitions: int = 16, gain: float = 0.01, std=DESK_STD,
              v: float = 0.3, dt: float = 1.0, H: int = 20) -> Task:
    """5 x 5 x 8 cells over ``[0, 1.5]^2 x [0, 2pi)``; controller ``u = k . x + b`` with small gains."""
    sg = build_state_grid(Box([0, 0, 0], [DESK_SIZE, DESK_SIZE, TWO_PI]),
                          [DESK_SIZE / 5, DESK_SIZE / 5, TWO_PI / 8], periodic=[False, False, True])
    b_max = 1.6
    cg = build_controller_grid(Box([-gain, -gain, -gain, -b_max], [gain, gain, gain, b_max]),
                               [2 * gain, 2 * gain, 2 * gain, 2 * b_max / partitions])
    kernel = StochasticKernel(dubins_dynamics(DubinsParams(v=v, dt=dt)), None, std_floor=np.asarray(std, float))
    spec = DESK_SPEC if H == 20 else f"!obs U[0,{H}] goal"
    return Task(kernel, spec, desk_workspace(moved), Box([0, 0, 0], [0.3, 0.3, TWO_PI]), H, sg, cg)


class _Shift1D:
    def __call__(self, X, U):
        return X + U


def separation_task(eta_q: float = 2.0, eta_P=(1.0, 1.25), std: float = 0.01, H: int = 4) -> Task:
    """1-D line ``[0, 4]``: goal ``[2, 3]``, obstacle ``[3, 4]``, start in ``[0, 2)``, ``x' = x + u``.

    With two cells the goal cell also meets the obstacle, so nothing is reachable;
    one halving separates them.
    """
    sg = build_state_grid(Box([0.0], [4.0]), [eta_q])
    cg = build_controller_grid(Box([-0.5, -2.5], [0.5, 2.5]), list(eta_P))
    kernel = StochasticKernel(NominalDynamics(_Shift1D(), 1, 1, "shift"), None, std_floor=std)
    ws = Workspace(Box([0.0], [4.0]), (Region("goal", "goal", Box([2.0], [3.0])),
                                       Region("obs", "obstacle", Box([3.0], [4.0]))))
    return Task(kernel, f"!obs U[0,{H}] goal", ws, Box([0.0], [1.999]), H, sg, cg)


def integrator_task(n: int, cells_per_dim: int, b_cells: int, std: float = 0.01, H: int = 5,
                    extent: float = 1.0) -> Task:
    """Integrator chain on ``[0, extent]^n`` with two inputs; only the offsets ``b'`` are partitioned.

    The goal is the top corner of the two actuated coordinates.
    """
    kernel = StochasticKernel(integrator_chain_dynamics(n), None, std_floor=std)
    sg = build_state_grid(Box(np.zeros(n), np.full(n, extent)), np.full(n, extent / cells_per_dim))
    m = 2
    lo = np.zeros((m, n + 1))
    hi = np.zeros((m, n + 1))
    lo[:, :n], hi[:, :n] = -0.01, 0.01
    lo[:, n], hi[:, n] = -0.3, 0.3
    widths = np.zeros((m, n + 1))
    widths[:, :n] = 0.02
    widths[:, n] = 0.6 / b_cells
    cg = build_controller_grid(Box(lo.ravel(), hi.ravel()), widths.ravel())
    k = min(n, m)
    goal_lo = np.full(k, extent - extent / cells_per_dim)
    ws = Workspace(Box(np.zeros(k), np.full(k, extent)), (Region("goal", "goal", Box(goal_lo, np.full(k, extent))),))
    init = Box(np.zeros(n), np.full(n, extent / cells_per_dim))
    return Task(kernel, f"F[0,{H}] goal", ws, init, H, sg, cg)
