"""Gaussian one-step kernel: nominal simulator plus a GP-learned model error.

The next state is ``Normal(f(x,u) + mu_g(x,u), diag(sigma_g(x,u)^2))``, where
``g`` is fitted by independent exact GPs (one per state dimension) with a
squared-exponential kernel.  Probabilities of boxes factor into products of
1-D normal CDF differences.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr

from .grid import Box
from .numeric import TOL

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NominalDynamics:
    """Black-box next-state map; ``f`` must accept batched ``(B, n)``/``(B, m)`` arrays."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n: int
    m: int
    name: str = "nominal"

    def __call__(self, X, U) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        single = X.ndim == 1
        Xb = np.atleast_2d(X)
        Ub = np.atleast_2d(U)
        if Ub.shape[0] == 1 and Xb.shape[0] > 1:
            Ub = np.broadcast_to(Ub, (Xb.shape[0], Ub.shape[1]))
        Y = np.asarray(self.f(Xb, Ub), dtype=float)
        return Y[0] if single else Y


@dataclass(frozen=True)
class GpHypers:
    signal_var: float = 1.0
    lengthscales: tuple = (1.0,)
    noise_var: float = 1e-4

    def scales(self, d: int) -> np.ndarray:
        ls = np.asarray(self.lengthscales, dtype=float).ravel()
        if ls.size == 1:
            ls = np.full(d, ls[0])
        if ls.size != d:
            raise ValueError(f"{ls.size} lengthscales given for {d} inputs")
        return ls


def se_kernel(A: np.ndarray, B: np.ndarray, signal_var: float, ls: np.ndarray) -> np.ndarray:
    Za, Zb = A / ls, B / ls
    d2 = np.sum(Za**2, 1)[:, None] + np.sum(Zb**2, 1)[None, :] - 2.0 * Za @ Zb.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass(frozen=True, eq=False)
class GpModelError:
    inputs: np.ndarray  # (N, n+m), duplicates averaged
    targets: np.ndarray  # (N, n)
    hypers: GpHypers
    chol: np.ndarray = field(repr=False)  # lower Cholesky factor of K + (noise+jitter) I
    alpha: np.ndarray = field(repr=False)  # (N, n)
    jitter: float = 0.0

    def predict(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean ``(B, n)`` and variance ``(B,)`` at inputs ``Z``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        ls = self.hypers.scales(Z.shape[1])
        Ks = se_kernel(Z, self.inputs, self.hypers.signal_var, ls)
        mean = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = self.hypers.signal_var - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        n_pts, n_out = self.targets.shape
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        fit = float(np.sum(self.targets * self.alpha))
        return -0.5 * fit - 0.5 * n_out * logdet - 0.5 * n_out * n_pts * np.log(2 * np.pi)


def _dedupe(inputs: np.ndarray, targets: np.ndarray):
    uniq, inv = np.unique(inputs, axis=0, return_inverse=True)
    inv = inv.ravel()
    if uniq.shape[0] == inputs.shape[0]:
        order = np.lexsort(inputs.T[::-1])
        return inputs[order], targets[order]
    sums = np.zeros((uniq.shape[0], targets.shape[1]))
    np.add.at(sums, inv, targets)
    counts = np.bincount(inv, minlength=uniq.shape[0])[:, None]
    return uniq, sums / counts


def gp_fit(samples, hypers: GpHypers | None = None, max_jitter: float = 1e-2) -> GpModelError:
    """Fit the model-error GP to ``[((x, u), residual), ...]`` or an ``(inputs, targets)`` pair."""
    hypers = GpHypers() if hypers is None else hypers
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) == 2:
        inputs, targets = (np.asarray(a, dtype=float) for a in samples)
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("gp_fit needs at least one sample")
        inputs = np.array([np.concatenate([np.ravel(xu[0]), np.ravel(xu[1])]) for xu, _ in samples], dtype=float)
        targets = np.array([np.ravel(r) for _, r in samples], dtype=float)
    if inputs.shape[0] == 0:
        raise ValueError("gp_fit needs at least one sample")
    inputs, targets = _dedupe(inputs, targets)
    ls = hypers.scales(inputs.shape[1])
    K = se_kernel(inputs, inputs, hypers.signal_var, ls)
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(K + (hypers.noise_var + jitter) * np.eye(K.shape[0]))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 * hypers.signal_var if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter * hypers.signal_var:
                raise np.linalg.LinAlgError("GP kernel matrix not factorizable within the jitter limit")
    alpha = cho_solve((L, True), targets)
    return GpModelError(inputs, targets, hypers, L, alpha, jitter)


def select_hypers(samples, grid: Sequence[GpHypers]) -> GpModelError:
    """Coarse deterministic log-marginal-likelihood grid search."""
    best, best_lml = None, -np.inf
    for h in grid:
        try:
            gp = gp_fit(samples, h)
        except np.linalg.LinAlgError:
            continue
        lml = gp.log_marginal_likelihood()
        if lml > best_lml:
            best, best_lml = gp, lml
    if best is None:
        raise np.linalg.LinAlgError("no hyperparameter candidate produced a factorizable kernel")
    return best


def hyper_grid(signal_vars, lengthscales, noise_vars) -> list[GpHypers]:
    return [GpHypers(s, (l,), nv) for s, l, nv in itertools.product(signal_vars, lengthscales, noise_vars)]


@dataclass(frozen=True, eq=False)
class StochasticKernel:
    nominal: NominalDynamics
    error: GpModelError | None = None
    std_floor: np.ndarray | float = TOL.std_floor

    def floor(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.std_floor, dtype=float), (self.nominal.n,))


def kernel_moments(k: StochasticKernel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Mean and per-dimension std of the next state (batched over leading axis)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X, U = np.atleast_2d(x), np.atleast_2d(u)
    if U.shape[0] == 1 and X.shape[0] > 1:
        U = np.repeat(U, X.shape[0], axis=0)
    mean = k.nominal(X, U)
    floor = k.floor()
    if k.error is None:
        std = np.broadcast_to(floor, mean.shape).copy()
    else:
        mu_g, var_g = k.error.predict(np.hstack([X, U]))
        mean = mean + mu_g
        sd = np.sqrt(var_g + k.error.hypers.noise_var)[:, None]
        std = np.maximum(sd, floor)
    return (mean[0], std[0]) if single else (mean, std)


def interval_mass(lo, hi, mean, std) -> np.ndarray:
    """``Phi((hi-m)/s) - Phi((lo-m)/s)`` computed on the tail that avoids cancellation."""
    a = (np.asarray(lo, dtype=float) - mean) / std
    b = (np.asarray(hi, dtype=float) - mean) / std
    upper = a > 0  # both in the right tail: use the survival side
    out = np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.maximum(out, 0.0)


def gaussian_box_integral(mean, std, box: Box | tuple) -> float:
    if isinstance(box, Box):
        lo, hi = box.lo, box.hi
    else:
        lo, hi = (np.asarray(a, dtype=float) for a in box)
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    return float(np.prod(interval_mass(lo, hi, np.asarray(mean, dtype=float), std)))


def sample_next(k: StochasticKernel, x, u, rng: np.random.Generator) -> np.ndarray:
    mean, std = kernel_moments(k, x, u)
    return mean + std * rng.standard_normal(np.shape(mean))


def read_residual_csv(path, n: int, m: int):
    """Rows ``x..., u..., residual...`` (a header line is skipped if present)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec:
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                if rows:
                    raise
                continue  # header
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 * n + m:
        raise ValueError(f"residual CSV must have {2 * n + m} columns")
    return arr[:, : n + m], arr[:, n + m:]


def write_residual_csv(path, inputs: np.ndarray, targets: np.ndarray, n: int, m: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"r{i}" for i in range(n)])
        for a, b in zip(inputs, targets):
            w.writerow([repr(float(v)) for v in np.concatenate([a, b])])
