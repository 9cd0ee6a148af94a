"""Closed-loop execution of composed planners and the training accelerations around it.

A :class:`Plan` is the abstraction, automaton, product and DP tables of one
task.  A :class:`ComposedPlanner` pairs a plan's activation maps with a
library of local networks: at step ``k`` in cell ``q`` with automaton state
``s`` it runs the network stored under ``(q, Gamma_k(q, s))``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from .grid import Box, ControllerGrid, StateGrid, build_controller_grid, build_state_grid
from .kernel import StochasticKernel, sample_next
from .numeric import ConfigError
from .projection import project_output_layer
from .relunet import ReluNet, eval as net_eval
from .spec.automaton import Dfa, to_dfa
from .spec.formula import atoms, horizon, parse
from .spec.workspace import Workspace, label_concrete, label_grid
from .symbolic import DpResult, ProductMdp, SymbolicMdp, build_mdp, build_product, dp_solve, partition_laws
from .trainer import (CostFunctional, NnLibrary, TrainConfig, _backward, _flatten, _forward, _unflatten, gradient_phase,
                      item_rng, train_pairs)

log = logging.getLogger(__name__)

ACCEPTED, TRAP, HORIZON, LEFT, NO_ACTION = "accepted", "trap", "horizon-exhausted", "left-domain", "no-action"


class MissingNetError(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class Task:
    kernel: StochasticKernel
    spec: str
    workspace: Workspace
    initial: Box
    H: int
    state_grid: StateGrid
    controller_grid: ControllerGrid
    simulator: Callable | None = None  # concrete stepping; defaults to sampling the kernel

    def __post_init__(self):
        f = parse(self.spec)
        unknown = atoms(f) - set(self.workspace.names)
        if unknown:
            raise ConfigError(f"formula atoms {sorted(unknown)} are not workspace regions")
        if self.H < max(1, horizon(f)):
            raise ConfigError(f"horizon {self.H} is shorter than the formula's time span {horizon(f)}")
        if self.initial.dim != self.state_grid.dim:
            raise ConfigError("initial set dimension differs from the state grid")

    def regrid(self, eta_q, eta_P) -> "Task":
        sg = build_state_grid(self.state_grid.domain, eta_q, self.state_grid.periodic)
        cg = build_controller_grid(self.controller_grid.domain, eta_P)
        return replace(self, state_grid=sg, controller_grid=cg)

    def initial_cells(self) -> np.ndarray:
        """Cells whose interior meets the initial set."""
        out = []
        for q in range(self.state_grid.size):
            c = self.state_grid.cell_box(q)
            if np.all(c.lo < self.initial.hi) and np.all(self.initial.lo < c.hi):
                out.append(q)
        return np.asarray(out, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Plan:
    task: Task
    mdp: SymbolicMdp
    dfa: Dfa
    product: ProductMdp
    dp: DpResult

    def initial_states(self) -> list[tuple[int, int]]:
        return [self.product.initial_state(int(q)) for q in self.task.initial_cells()]

    def initial_values(self) -> np.ndarray:
        return np.array([self.dp.V[0][qs] for qs in self.initial_states()])

    def value_at(self, x0) -> float:
        q0 = self.task.state_grid.locate(x0)
        if q0 == self.task.state_grid.sink:
            return 0.0
        return self.dp.value(*self.product.initial_state(q0))

    def referenced_pairs(self) -> set:
        """Every ``(q, P)`` some activation map assigns, over all steps and automaton states."""
        G = self.dp.Gamma
        k, q, s = np.nonzero(G >= 0)
        return {(int(a), int(b)) for a, b in zip(q, G[k, q, s])}


def plan_task(task: Task, available=None, mdp: SymbolicMdp | None = None) -> Plan:
    if mdp is None:
        mdp = build_mdp(task.state_grid, task.controller_grid, task.kernel, available=available)
    dfa = to_dfa(task.spec, task.H)
    labels = label_grid(task.state_grid, task.workspace)
    product = build_product(mdp, dfa, labels, task.workspace.names)
    return Plan(task, mdp, dfa, product, dp_solve(product, task.H))


# --- execution -----------------------------------------------------------------

@dataclass
class Trajectory:
    xs: list = field(default_factory=list)
    us: list = field(default_factory=list)
    qs: list = field(default_factory=list)
    ss: list = field(default_factory=list)
    status: str = ""

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED

    def labels(self, ws: Workspace) -> list[frozenset]:
        return [label_concrete(x, ws) for x in self.xs]

    def write_csv(self, path) -> None:
        n = len(self.xs[0]) if self.xs else 0
        m = len(self.us[0]) if self.us else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["q", "s", "status"])
            for k, x in enumerate(self.xs):
                u = self.us[k] if k < len(self.us) else [float("nan")] * m
                w.writerow([k] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u]
                           + [self.qs[k], self.ss[k], self.status if k == len(self.xs) - 1 else ""])


@dataclass
class ComposedPlanner:
    library: NnLibrary
    Gamma: np.ndarray  # (H, N + 1, Z)
    dfa: Dfa
    workspace: Workspace
    state_grid: StateGrid

    @classmethod
    def from_plan(cls, plan: Plan, library: NnLibrary) -> "ComposedPlanner":
        return cls(library, plan.dp.Gamma, plan.dfa, plan.task.workspace, plan.task.state_grid)

    @property
    def H(self) -> int:
        return int(self.Gamma.shape[0])

    def select(self, k: int, q: int, s: int) -> tuple[int, int] | None:
        P = int(self.Gamma[k, q, s])
        return None if P < 0 else (q, P)

    def missing(self) -> set:
        G = self.Gamma
        k, q, s = np.nonzero(G >= 0)
        return {(int(a), int(b)) for a, b in zip(q, G[k, q, s])} - set(self.library.entries)


def run_closed_loop(planner: ComposedPlanner, kernel_or_sim, x0, rng: np.random.Generator,
                    on_missing: Callable[[tuple], ReluNet] | None = None) -> Trajectory:
    """Simulate until acceptance, a trap state, leaving the domain, a state without action, or step H."""
    dfa, grid = planner.dfa, planner.state_grid
    trap = dfa.trap
    if isinstance(kernel_or_sim, StochasticKernel):
        step = lambda x, u: sample_next(kernel_or_sim, x, u, rng)  # noqa: E731
    else:
        step = kernel_or_sim
    x = grid.wrap(np.asarray(x0, dtype=float))
    s = dfa.step(dfa.initial, label_concrete(x, planner.workspace))
    q = grid.locate(x)
    tr = Trajectory([x], [], [q], [s])
    for k in range(planner.H + 1):
        if dfa.accepting[s]:
            tr.status = ACCEPTED
            break
        if trap[s]:
            tr.status = TRAP
            break
        if q == grid.sink:
            tr.status = LEFT
            break
        if k == planner.H:
            tr.status = HORIZON
            break
        key = planner.select(k, q, s)
        if key is None:
            tr.status = NO_ACTION
            break
        if key not in planner.library:
            if on_missing is None:
                raise MissingNetError(f"no network for cell {key[0]} and partition {key[1]}")
            planner.library.insert(key, *on_missing(key))
        u = np.atleast_1d(net_eval(planner.library[key], x))
        x = grid.wrap(np.asarray(step(x, u), dtype=float))
        s = dfa.step(s, label_concrete(x, planner.workspace))
        q = grid.locate(x)
        tr.us.append(u)
        tr.xs.append(x)
        tr.qs.append(q)
        tr.ss.append(s)
    return tr


def replay_states(tr: Trajectory, dfa: Dfa, ws: Workspace) -> list[int]:
    """Automaton states recomputed from the concrete labels of the visited states."""
    s = dfa.step(dfa.initial, label_concrete(tr.xs[0], ws))
    out = [s]
    for x in tr.xs[1:]:
        s = dfa.step(s, label_concrete(x, ws))
        out.append(s)
    return out


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    if trials < 1:
        raise ValueError("at least one trial is required")
    z = NormalDist().inv_cdf(0.5 + level / 2)
    p = successes / trials
    den = 1 + z * z / trials
    mid = (p + z * z / (2 * trials)) / den
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / den
    lo = 0.0 if successes == 0 else max(0.0, mid - half)
    hi = 1.0 if successes == trials else min(1.0, mid + half)
    return lo, hi


@dataclass(frozen=True)
class McResult:
    estimate: float
    ci: tuple
    accepted: int
    trials: int
    statuses: dict


def mc_satisfaction(planner: ComposedPlanner, kernel_or_sim, x0, trials: int, seed: int = 0,
                    keep: list | None = None) -> McResult:
    """Accepted fraction over independent rollouts; ``x0`` may be a point or a Box to sample from."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    seeds = np.random.SeedSequence(seed).spawn(trials)
    acc, statuses = 0, {}
    for ss in seeds:
        rng = np.random.default_rng(ss)
        start = x0.sample(rng) if isinstance(x0, Box) else x0
        tr = run_closed_loop(planner, kernel_or_sim, start, rng)
        acc += tr.accepted
        statuses[tr.status] = statuses.get(tr.status, 0) + 1
        if keep is not None:
            keep.append(tr)
    return McResult(acc / trials, wilson_interval(acc, trials), acc, trials, statuses)


# --- transfer ------------------------------------------------------------------

def nn_distance(a, b, state_grid: StateGrid, controller_grid: ControllerGrid,
                alpha1: float = 1.0, alpha2: float = 1.0) -> float:
    dq = np.linalg.norm(state_grid.center(a[0]) - state_grid.center(b[0]))
    dp = np.max(np.abs(controller_grid.center(a[1]) - controller_grid.center(b[1])))
    return float(alpha1 * dq + alpha2 * dp)


def nearest_key(key, library: NnLibrary, state_grid: StateGrid, controller_grid: ControllerGrid,
                alpha1: float = 1.0, alpha2: float = 1.0):
    if not library.entries:
        raise MissingNetError("cannot transfer from an empty library")
    keys = sorted(library.entries)
    d = [nn_distance(key, k, state_grid, controller_grid, alpha1, alpha2) for k in keys]
    return keys[int(np.argmin(d))]


def _check_shared_grids(tasks: Sequence[Task]) -> None:
    ref = (tasks[0].state_grid.content_hash(), tasks[0].controller_grid.content_hash())
    for t in tasks[1:]:
        if (t.state_grid.content_hash(), t.controller_grid.content_hash()) != ref:
            raise ConfigError("all transfer tasks must share the same grids")


def train_transfer(tasks: Sequence[Task], cost: CostFunctional, cfg: TrainConfig,
                   workers: int | None = None, plans: list | None = None) -> NnLibrary:
    """Formally train exactly the pairs any task's activation maps reference."""
    if not tasks:
        return NnLibrary("", "")
    _check_shared_grids(tasks)
    keys: set = set()
    for t in tasks:
        p = plan_task(t)
        if plans is not None:
            plans.append(p)
        keys |= p.referenced_pairs()
    t0 = tasks[0]
    return train_pairs(t0.state_grid, t0.controller_grid, keys, t0.kernel.nominal, cost, cfg, workers)


@dataclass
class TransferLog:
    trained: list = field(default_factory=list)  # (key, source key)


def make_transfer(library: NnLibrary, task: Task, cost: CostFunctional, cfg: TrainConfig,
                  log_: TransferLog, alpha1: float = 1.0, alpha2: float = 1.0):
    """Missing-net handler: clone the nearest stored net, fine-tune briefly, project into the partition."""
    sg, cg = task.state_grid, task.controller_grid

    def handler(key):
        src = nearest_key(key, library, sg, cg, alpha1, alpha2)
        q_box, p_box = sg.cell_box(key[0]), cg.cell_box(key[1])
        rng = item_rng(cfg.seed, *key)
        net = gradient_phase(library[src], q_box, p_box, task.kernel.nominal, cost, cfg, rng,
                             episodes=cfg.finetune_episodes)
        res = project_output_layer(net, q_box, p_box)
        log_.trained.append((key, src))
        return res.net, {"transferred_from": list(src), "episodes": cfg.finetune_episodes,
                         "projection_objective": res.objective}

    return handler


def runtime_transfer(task: Task, library: NnLibrary, cost: CostFunctional, cfg: TrainConfig, x0,
                     rng: np.random.Generator, plan: Plan | None = None,
                     alpha1: float = 1.0, alpha2: float = 1.0) -> tuple[Trajectory, NnLibrary, TransferLog]:
    plan = plan_task(task) if plan is None else plan
    if library.entries:
        library.check_grids(task.state_grid, task.controller_grid)
    else:
        library = NnLibrary(task.state_grid.content_hash(), task.controller_grid.content_hash())
    planner = ComposedPlanner.from_plan(plan, library)
    tlog = TransferLog()
    handler = make_transfer(library, task, cost, cfg, tlog, alpha1, alpha2)
    sim = task.simulator if task.simulator is not None else task.kernel
    tr = run_closed_loop(planner, sim, x0, rng, on_missing=handler)
    return tr, library, tlog


# --- demonstrations ------------------------------------------------------------

@dataclass
class DemoSet:
    demos: list  # [(X (T, n), U (T, m))]

    def __len__(self) -> int:
        return len(self.demos)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.demos:
            raise ValueError("empty demonstration set")
        return np.vstack([d[0] for d in self.demos]), np.vstack([d[1] for d in self.demos])

    def write_csv(self, path) -> None:
        n, m = self.demos[0][0].shape[1], self.demos[0][1].shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)])
            for X, U in self.demos:
                for k, (x, u) in enumerate(zip(X, U)):
                    w.writerow([k] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])

    @classmethod
    def read_csv(cls, path, n: int) -> "DemoSet":
        """Rows ``k, x..., u...``; a row with ``k == 0`` starts a new demonstration."""
        demos, cur = [], []
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header is None:
                raise ValueError("empty demonstration file")
            for rec in rd:
                if not rec:
                    continue
                k, vals = int(rec[0]), [float(v) for v in rec[1:]]
                if k == 0 and cur:
                    demos.append(cur)
                    cur = []
                cur.append(vals)
        if cur:
            demos.append(cur)
        out = []
        for d in demos:
            a = np.asarray(d, dtype=float)
            out.append((a[:, :n], a[:, n:]))
        return cls(out)


def fit_bc(demos: DemoSet, hidden=(32, 32), steps: int = 3000, lr: float = 0.01,
           rng: np.random.Generator | None = None) -> ReluNet:
    """Behaviour cloning: full-batch Adam on the squared action error, inputs standardized."""
    rng = np.random.default_rng(0) if rng is None else rng
    X, U = demos.stacked()
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xn = (X - mu) / sd
    sizes = [X.shape[1], *hidden, U.shape[1]]
    net = ReluNet(tuple((rng.uniform(-1, 1, (b, a)) * math.sqrt(6.0 / a), np.zeros(b))  # He-uniform
                        for a, b in zip(sizes[:-1], sizes[1:])))
    theta = _flatten(net.layers)
    mom, vel = np.zeros_like(theta), np.zeros_like(theta)
    for t in range(1, steps + 1):
        cur = _unflatten(theta, net)
        out, acts = _forward(cur, Xn)
        g = _flatten(_backward(cur, acts, 2.0 * (out - U) / X.shape[0]))
        mom = 0.9 * mom + 0.1 * g
        vel = 0.999 * vel + 0.001 * g * g
        theta = theta - lr * (mom / (1 - 0.9**t)) / (np.sqrt(vel / (1 - 0.999**t)) + 1e-8)
    cur = _unflatten(theta, net)
    W1, b1 = cur.layers[0]
    W1 = W1 / sd[None, :]  # fold the standardization into the first layer
    return ReluNet(((W1, b1 - W1 @ mu),) + tuple(cur.layers[1:]))


def rank_partitions(task: Task, bc: ReluNet, I: int, chunk: int = 4096) -> np.ndarray:
    """Availability mask keeping, per cell, the ``I`` partitions whose center law best matches ``bc``."""
    sg, cg = task.state_grid, task.controller_grid
    N, M = sg.size, cg.size
    I = min(int(I), M)
    K, b = partition_laws(sg, cg, task.kernel.nominal.m)
    Zc = sg.centers()
    avail = np.zeros((N, M), dtype=bool)
    for a in range(0, N, chunk):
        z = Zc[a:a + chunk]
        target = np.atleast_2d(net_eval(bc, z))
        laws = np.einsum("pij,qj->qpi", K, z) + b[None, :, :]
        d = np.linalg.norm(laws - target[:, None, :], axis=2)
        top = np.argsort(d, axis=1, kind="stable")[:, :I]
        avail[np.arange(a, a + z.shape[0])[:, None], top] = True
    return avail


def build_mdp_from_demos(task: Task, demos: DemoSet, I: int, kernel: StochasticKernel | None = None,
                         bc: ReluNet | None = None) -> SymbolicMdp:
    if I < 1:
        raise ValueError("I must be at least 1")
    if not len(demos):
        raise ValueError("empty demonstration set")
    bc = fit_bc(demos) if bc is None else bc
    avail = rank_partitions(task, bc, I)
    return build_mdp(task.state_grid, task.controller_grid, task.kernel if kernel is None else kernel,
                     available=avail)


@dataclass
class AdaptResult:
    library: NnLibrary
    plan: Plan
    refinements: int
    I: int
    value: float
    achieved: bool
    history: list


def adapt_partition(task: Task, demos: DemoSet, library: NnLibrary | None, cost: CostFunctional,
                    eta_q, eta_P, I: int, p: float, cfg: TrainConfig, max_refinements: int = 4,
                    train_nets: bool = True, workers: int | None = None) -> AdaptResult:
    """Refine grids (halving widths, doubling I) until the worst initial value reaches ``p``."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    eta_q = np.asarray(eta_q, dtype=float)
    eta_P = np.asarray(eta_P, dtype=float)
    bc = fit_bc(demos)
    history = []
    r = 0
    while True:
        t = task.regrid(eta_q, eta_P)
        plan = plan_task(t, mdp=build_mdp_from_demos(t, demos, I, bc=bc))
        vals = plan.initial_values()
        value = float(vals.min()) if vals.size else 0.0
        history.append({"eta_q": eta_q.tolist(), "eta_P": eta_P.tolist(), "I": I, "value": value})
        if value >= p or r == max_refinements:
            break
        eta_q, eta_P, I, r = eta_q / 2, eta_P / 2, 2 * I, r + 1
    sg, cg = t.state_grid, t.controller_grid
    if library is None or (library.state_grid_hash, library.controller_grid_hash) != (
            sg.content_hash(), cg.content_hash()):
        library = NnLibrary(sg.content_hash(), cg.content_hash())
    if train_nets:
        missing = plan.referenced_pairs() - set(library.entries)
        library.merge(train_pairs(sg, cg, missing, t.kernel.nominal, cost, cfg, workers))
    return AdaptResult(library, plan, r, I, value, value >= p, history)


def load_demos(path, n: int) -> DemoSet:
    return DemoSet.read_csv(Path(path), n)
