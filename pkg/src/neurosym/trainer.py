"""Formal training of local ReLU controllers and batch library construction.

Training alternates a policy-gradient phase with the output-layer projection,
so whatever the optimizer does, every returned network lies in its controller
partition on its cell.  The gradient phase is a Gaussian-perturbation
score-function estimator with a per-step batch-mean baseline and Adam updates,
rolled out through the nominal simulator.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .grid import Box, ControllerGrid, StateGrid
from .projection import check_membership, project_output_layer
from .relunet import ReluNet, init_net, params_to_piece

log = logging.getLogger(__name__)

Simulator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def energy_cost(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    return np.sum(U * U, axis=-1)


def zero_cost(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    return np.zeros(X.shape[0])


@dataclass(frozen=True)
class CostFunctional:
    """State-action cost ``c(x, u)`` (batched) and the rollout shape used to estimate J."""

    c: Callable[[np.ndarray, np.ndarray], np.ndarray] = energy_cost
    horizon: int = 5
    count: int = 20

    def estimate(self, net: ReluNet, q: Box, nominal: Simulator, rng: np.random.Generator) -> float:
        """Empirical J: mean cost along nominal rollouts started uniformly in q."""
        X = q.sample(rng, self.count)
        total = 0.0
        for _ in range(self.horizon):
            U = _forward(net, X)[0]
            total += float(np.mean(self.c(X, U)))
            X = nominal(X, U)
        return total / self.horizon


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 4
    episodes: int = 200
    batch: int = 10
    lr: float = 0.05
    noise: float = 0.1
    w1: float = 1.0
    w2: float = 1.0
    seed: int = 0
    hidden: tuple = (6,)
    finetune_episodes: int = 80

    def __post_init__(self):
        if self.max_iter < 1 or self.episodes < 1 or self.batch < 2:
            raise ValueError("max_iter and episodes must be positive and batch at least 2")
        if self.lr < 0 or self.noise <= 0 or self.w1 < 0 or self.w2 < 0:
            raise ValueError("lr, w1, w2 must be nonnegative and noise positive")

    @classmethod
    def heavy(cls, **kw) -> "TrainConfig":
        return cls(episodes=800, **kw)


# --- forward/backward for the score-function gradient ---------------------

def _forward(net: ReluNet, X: np.ndarray):
    acts = [X]
    Z = X
    for W, b in net.hidden:
        Z = np.maximum(Z @ W.T + b, 0.0)
        acts.append(Z)
    W, b = net.output
    return Z @ W.T + b, acts


def _backward(net: ReluNet, acts: list, G: np.ndarray) -> list:
    """Gradients of ``sum(G * net(X))`` w.r.t. every (W, b)."""
    grads = [None] * len(net.layers)
    for k in reversed(range(len(net.layers))):
        W, _ = net.layers[k]
        A = acts[k]
        grads[k] = (G.T @ A, G.sum(axis=0))
        if k > 0:
            G = (G @ W) * (acts[k] > 0)
    return grads


def _flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def _unflatten(theta: np.ndarray, like: ReluNet) -> ReluNet:
    out, i = [], 0
    for W, b in like.layers:
        w = theta[i:i + W.size].reshape(W.shape); i += W.size
        bb = theta[i:i + b.size]; i += b.size
        out.append((w, bb))
    return ReluNet(tuple(out))


def gradient_phase(net: ReluNet, q: Box, partition: Box, nominal: Simulator, cost: CostFunctional,
                   cfg: TrainConfig, rng: np.random.Generator | None = None,
                   episodes: int | None = None) -> ReluNet:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    episodes = cfg.episodes if episodes is None else episodes
    if cfg.lr == 0.0 or episodes == 0:
        return net
    kappa = params_to_piece(partition.center, net.m, net.n)
    theta = _flatten(net.layers)
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    sigma = cfg.noise
    done, step = 0, 0
    while done < episodes:
        B = min(cfg.batch, episodes - done)
        if B < 2:
            break
        cur = _unflatten(theta, net)
        X = q.sample(rng, B)
        grad = np.zeros_like(theta)
        for t in range(cost.horizon):
            mu, acts = _forward(cur, X)
            U = mu + sigma * rng.standard_normal(mu.shape)
            r = -cfg.w1 * cost.c(X, U) - cfg.w2 * np.linalg.norm(U - kappa(X), axis=1)
            adv = r - r.mean()
            G = (U - mu) / sigma**2 * adv[:, None] / B
            grad += _flatten(_backward(cur, acts, G))
            try:
                X = np.asarray(nominal(X, U), dtype=float)
            except Exception as exc:  # surface with episode context
                raise RuntimeError(f"nominal simulator failed in episodes {done}..{done + B - 1}, step {t}") from exc
        grad /= cost.horizon
        step += 1
        mom = b1 * mom + (1 - b1) * grad
        vel = b2 * vel + (1 - b2) * grad * grad
        mhat = mom / (1 - b1**step)
        vhat = vel / (1 - b2**step)
        theta = theta + cfg.lr * mhat / (np.sqrt(vhat) + eps_adam)  # ascent
        done += B
    return _unflatten(theta, net)


def formal_train(q: Box, partition: Box, nominal: Simulator, cost: CostFunctional, cfg: TrainConfig,
                 net: ReluNet | None = None, rng: np.random.Generator | None = None,
                 record: dict | None = None) -> ReluNet:
    """Alternate gradient phases and projections ``cfg.max_iter`` times."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = q.dim
    m = partition.dim // (n + 1)
    if m * (n + 1) != partition.dim:
        raise ValueError(f"partition dimension {partition.dim} is not a multiple of n+1 = {n + 1}")
    if net is None:
        net = init_net(n, m, cfg.hidden, rng)
    objective = 0.0
    for _ in range(cfg.max_iter):
        net = gradient_phase(net, q, partition, nominal, cost, cfg, rng)
        res = project_output_layer(net, q, partition)
        net, objective = res.net, res.objective
    if record is not None:
        record.update({"episodes": cfg.episodes * cfg.max_iter, "projection_objective": objective,
                       "final_objective": cost.estimate(net, q, nominal, rng)})
    return net


def item_rng(seed: int, q: int, p: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(q), int(p)]))


@dataclass
class NnLibrary:
    state_grid_hash: str
    controller_grid_hash: str
    entries: dict = field(default_factory=dict)  # (q, P) -> ReluNet
    metadata: dict = field(default_factory=dict)  # (q, P) -> dict
    failures: dict = field(default_factory=dict)  # (q, P) -> message

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.entries

    def __getitem__(self, key) -> ReluNet:
        return self.entries[tuple(key)]

    def insert(self, key, net: ReluNet, meta: dict | None = None) -> None:
        key = (int(key[0]), int(key[1]))
        self.entries[key] = net
        self.metadata[key] = dict(meta or {})

    def merge(self, other: "NnLibrary") -> None:
        if (other.state_grid_hash, other.controller_grid_hash) != (self.state_grid_hash, self.controller_grid_hash):
            raise ValueError("cannot merge libraries built on different grids")
        for k, v in other.entries.items():
            if k not in self.entries:
                self.insert(k, v, other.metadata.get(k))
        self.failures.update(other.failures)

    def to_json(self) -> dict:
        return {
            "state_grid_hash": self.state_grid_hash,
            "controller_grid_hash": self.controller_grid_hash,
            "entries": [
                {"q": k[0], "P": k[1], "net": self.entries[k].to_json(), "metadata": self.metadata.get(k, {})}
                for k in sorted(self.entries)
            ],
            "failures": [{"q": k[0], "P": k[1], "error": v} for k, v in sorted(self.failures.items())],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, d: dict) -> "NnLibrary":
        lib = cls(d["state_grid_hash"], d["controller_grid_hash"])
        for e in d["entries"]:
            lib.insert((e["q"], e["P"]), ReluNet.from_json(e["net"]), e.get("metadata"))
        for f in d.get("failures", []):
            lib.failures[(f["q"], f["P"])] = f["error"]
        return lib

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "NnLibrary":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def check_grids(self, state_grid: StateGrid, controller_grid: ControllerGrid) -> None:
        if (self.state_grid_hash, self.controller_grid_hash) != (
            state_grid.content_hash(), controller_grid.content_hash()):
            raise ValueError("library was trained on different grids")


def _train_one(args):
    key, q_box, p_box, nominal, cost, cfg = args
    rng = item_rng(cfg.seed, *key)
    rec: dict = {}
    try:
        net = formal_train(q_box, p_box, nominal, cost, cfg, rng=rng, record=rec)
    except Exception as exc:  # recorded in the failure manifest
        return key, None, {"error": f"{type(exc).__name__}: {exc}"}
    return key, net, rec


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NEUROSYM_WORKERS", "1")))
    except ValueError:
        return 1


def train_pairs(state_grid: StateGrid, controller_grid: ControllerGrid, keys: Iterable, nominal: Simulator,
                cost: CostFunctional, cfg: TrainConfig, workers: int | None = None) -> NnLibrary:
    lib = NnLibrary(state_grid.content_hash(), controller_grid.content_hash())
    keys = sorted({(int(a), int(b)) for a, b in keys})
    jobs = [(k, state_grid.cell_box(k[0]), controller_grid.cell_box(k[1]), nominal, cost, cfg) for k in keys]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_train_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_train_one(j) for j in jobs]
    for key, net, rec in results:
        if net is None:
            lib.failures[key] = rec["error"]
            log.warning("training failed for %s: %s", key, rec["error"])
        else:
            lib.insert(key, net, rec)
    return lib


def train_library(state_grid: StateGrid, controller_grid: ControllerGrid, nominal: Simulator,
                  cost: CostFunctional, cfg: TrainConfig, workers: int | None = None) -> NnLibrary:
    keys = [(q, p) for q in range(state_grid.size) for p in range(controller_grid.size)]
    return train_pairs(state_grid, controller_grid, keys, nominal, cost, cfg, workers)


def audit_library(lib: NnLibrary, state_grid: StateGrid, controller_grid: ControllerGrid) -> list:
    """Membership sweep; returns ``[(q, P, violations)]`` for every failing entry."""
    bad = []
    for (q, p), net in sorted(lib.entries.items()):
        rep = check_membership(net, state_grid.cell_box(q), controller_grid.cell_box(p))
        if not rep.ok:
            bad.append((q, p, rep.violating))
    return bad


def config_to_json(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return replace(TrainConfig(), **d)
