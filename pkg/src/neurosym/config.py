"""Task configuration files: parsing, cross-validation, and construction of runtime objects.

A configuration is a JSON object::

    {
      "dynamics": {"preset": "dubins", "v": 0.3, "dt": 1.0},
      "kernel": {"std_floor": [0.06, 0.06, 0.15]},
      "state_domain": {"lo": [...], "hi": [...]}, "periodic": [false, false, true],
      "eta_q": [...],
      "controller_box": {"lo": [...], "hi": [...]}, "eta_P": [...],
      "spec": "!obs U[0,20] goal",
      "workspace": "workspace.json",
      "initial": {"lo": [...], "hi": [...]},
      "H": 20,
      "seeds": {"train": 0, "simulate": 0},
      "training": {"preset": "default", "episodes": 100, "max_iter": 2},
      "cost": {"horizon": 5, "count": 20}
    }

``workspace`` is a path (relative to the config file) or an inline workspace
object.  Dynamics presets are ``dubins``, ``integrator-chain`` (``n``, optional
``B``) and ``plugin`` (``"target": "module:function"`` returning a
:class:`~neurosym.kernel.NominalDynamics`).  A GP model error is fitted when
``kernel.gp.residuals`` names a residual CSV.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DubinsParams, dubins_dynamics, integrator_chain_dynamics
from .grid import Box, build_controller_grid, build_state_grid
from .kernel import GpHypers, NominalDynamics, StochasticKernel, gp_fit, read_residual_csv
from .numeric import ConfigError
from .runtime import Task
from .spec.formula import FormulaSyntaxError, atoms, horizon, parse
from .spec.workspace import Workspace
from .trainer import CostFunctional, TrainConfig

PRESETS = ("dubins", "integrator-chain", "plugin")


@dataclass
class TaskConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path) -> "TaskConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = cls(raw, path.resolve().parent)
        cfg.validate()
        return cfg

    def _get(self, key, default=None, required=True):
        if key in self.raw:
            return self.raw[key]
        if required and default is None:
            raise ConfigError(f"config is missing {key!r}")
        return default

    def dumps(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=1)

    # --- builders -------------------------------------------------------

    def nominal(self) -> NominalDynamics:
        d = dict(self._get("dynamics"))
        preset = d.get("preset")
        if preset == "dubins":
            try:
                return dubins_dynamics(DubinsParams(float(d.get("v", 0.3)), float(d.get("dt", 1.0))))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        if preset == "integrator-chain":
            B = d.get("B")
            return integrator_chain_dynamics(int(d["n"]), None if B is None else np.asarray(B, float),
                                             int(d.get("m", 2)))
        if preset == "plugin":
            target = d.get("target", "")
            mod, _, fn = target.partition(":")
            if not mod or not fn:
                raise ConfigError("plugin dynamics need 'target': 'module:function'")
            try:
                out = getattr(importlib.import_module(mod), fn)(**d.get("args", {}))
            except (ImportError, AttributeError) as e:
                raise ConfigError(f"cannot load dynamics plugin {target!r}: {e}") from e
            if not isinstance(out, NominalDynamics):
                raise ConfigError("dynamics plugin must return a NominalDynamics")
            return out
        raise ConfigError(f"dynamics preset must be one of {PRESETS}, got {preset!r}")

    def kernel(self) -> StochasticKernel:
        nom = self.nominal()
        k = self._get("kernel", {}, required=False)
        floor = np.asarray(k.get("std_floor", 1e-6), dtype=float)
        gp = None
        if "gp" in k:
            g = k["gp"]
            X, R = read_residual_csv(self.base_dir / g["residuals"], nom.n, nom.m)
            h = GpHypers(float(g.get("signal_var", 1.0)), tuple(np.atleast_1d(g.get("lengthscales", 1.0))),
                         float(g.get("noise_var", 1e-4)))
            gp = gp_fit((X, R), h)
        return StochasticKernel(nom, gp, floor)

    def workspace(self) -> Workspace:
        w = self._get("workspace")
        if isinstance(w, dict):
            return Workspace.from_json(w)
        path = self.base_dir / w
        try:
            return Workspace.load(path)
        except OSError as e:
            raise ConfigError(f"cannot read workspace {path}: {e}") from e

    def task(self) -> Task:
        sd = Box.from_json(self._get("state_domain"))
        sg = build_state_grid(sd, self._get("eta_q"), self.raw.get("periodic"))
        cg = build_controller_grid(Box.from_json(self._get("controller_box")), self._get("eta_P"))
        return Task(self.kernel(), self._get("spec"), self.workspace(), Box.from_json(self._get("initial")),
                    int(self._get("H")), sg, cg)

    def train_config(self) -> TrainConfig:
        t = dict(self.raw.get("training", {}))
        preset = t.pop("preset", "default")
        if preset not in ("default", "heavy"):
            raise ConfigError(f"training preset must be 'default' or 'heavy', got {preset!r}")
        t.setdefault("seed", self.seed("train"))
        if "hidden" in t:
            t["hidden"] = tuple(t["hidden"])
        try:
            return TrainConfig.heavy(**t) if preset == "heavy" else TrainConfig(**t)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid training settings: {e}") from e

    def cost(self) -> CostFunctional:
        c = self.raw.get("cost", {})
        return CostFunctional(horizon=int(c.get("horizon", 5)), count=int(c.get("count", 20)))

    def seed(self, name: str) -> int:
        return int(self.raw.get("seeds", {}).get(name, 0))

    # --- validation -------------------------------------------------------

    def validate(self) -> None:
        for key in ("dynamics", "state_domain", "eta_q", "controller_box", "eta_P", "spec", "workspace",
                    "initial", "H"):
            self._get(key)
        try:
            f = parse(self.raw["spec"])
        except FormulaSyntaxError as e:
            raise ConfigError(f"invalid spec: {e}") from e
        ws = self.workspace()
        missing = atoms(f) - set(ws.names)
        if missing:
            raise ConfigError(f"spec atoms {sorted(missing)} are not workspace regions")
        H = self.raw["H"]
        if not isinstance(H, int) or H < max(1, horizon(f)):
            raise ConfigError(f"H = {H!r} must be an integer of at least {max(1, horizon(f))}")
        nom = self.nominal()
        sd = Box.from_json(self.raw["state_domain"])
        if sd.dim != nom.n:
            raise ConfigError(f"state domain has {sd.dim} dimensions, dynamics has {nom.n}")
        cb = Box.from_json(self.raw["controller_box"])
        if cb.dim != nom.m * (nom.n + 1):
            raise ConfigError(f"controller box needs m*(n+1) = {nom.m * (nom.n + 1)} dimensions, has {cb.dim}")
        if ws.domain.dim > sd.dim or np.any(ws.domain.lo < sd.lo[:ws.domain.dim] - 1e-12) or np.any(
                ws.domain.hi > sd.hi[:ws.domain.dim] + 1e-12):
            raise ConfigError("workspace lies outside the state domain")
        self.task()  # grid divisibility and remaining cross-checks
        self.train_config()


def desk_config(workspace: str | dict = "workspace.json", partitions: int = 16) -> dict:
    """Configuration of the desk-scale Dubins reach-avoid scenario."""
    two_pi = 2 * np.pi
    gain = 0.01
    return {
        "dynamics": {"preset": "dubins", "v": 0.3, "dt": 1.0},
        "kernel": {"std_floor": [0.06, 0.06, 0.15]},
        "state_domain": {"lo": [0.0, 0.0, 0.0], "hi": [1.5, 1.5, two_pi]},
        "periodic": [False, False, True],
        "eta_q": [0.3, 0.3, two_pi / 8],
        "controller_box": {"lo": [-gain, -gain, -gain, -1.6], "hi": [gain, gain, gain, 1.6]},
        "eta_P": [2 * gain, 2 * gain, 2 * gain, 3.2 / partitions],
        "spec": "!obs U[0,20] goal",
        "workspace": workspace,
        "initial": {"lo": [0.0, 0.0, 0.0], "hi": [0.3, 0.3, two_pi]},
        "H": 20,
        "seeds": {"train": 0, "simulate": 1},
        "training": {"preset": "default", "episodes": 100, "max_iter": 2},
        "cost": {"horizon": 5, "count": 20},
    }
