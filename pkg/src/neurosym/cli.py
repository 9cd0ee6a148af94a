"""Command-line front end.

Every command reads a task configuration and writes into a run directory whose
``manifest.json`` lists each artifact with its SHA-256.  Layout::

    run/
      manifest.json     artifact -> sha256, plus the config hash
      dfa.json          compiled automaton
      mdp.txt           abstraction (JSON header line + q,P,q2,prob rows)
      values.npz        value and activation tables per step
      value_table.csv   q, s, V_0 for every product state
      activation_0.csv  q, s, partition selected at step 0
      library.json      trained networks
      mc.json           Monte-Carlo summary
      trajectories/     one CSV per rollout kept
      bounds.json, audit.json, adapt.json, transfer.json

Exit codes: 0 success, 1 failed check (audit violations), 2 invalid
configuration, 3 capability limit exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bounds import bound_report, dumps_report, estimate_params
from .config import TaskConfig, desk_config
from .numeric import CapabilityError, ConfigError
from .runtime import (ComposedPlanner, DemoSet, adapt_partition, build_mdp_from_demos, mc_satisfaction, plan_task,
                      runtime_transfer, train_transfer)
from .scenarios import desk_workspace
from .spec.automaton import to_dfa
from .spec.formula import FormulaSyntaxError
from .symbolic import SymbolicMdp, build_mdp
from .trainer import NnLibrary, audit_library, train_library

log = logging.getLogger("neurosym")


class Run:
    def __init__(self, root, config: TaskConfig | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {
            "artifacts": {}}
        if config is not None:
            self.manifest["config_sha256"] = hashlib.sha256(config.dumps().encode()).hexdigest()

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, name: str) -> Path:
        p = self.root / name
        self.manifest["artifacts"][name] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def write_text(self, name: str, text: str) -> Path:
        self.path(name).write_text(text)
        return self.record(name)

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def close(self) -> None:
        self.manifest["artifacts"] = dict(sorted(self.manifest["artifacts"].items()))
        self.manifest_path.write_text(json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")


def _mdp_for(run: Run, task, fresh: bool = False) -> SymbolicMdp:
    p = run.root / "mdp.txt"
    if p.exists() and not fresh:
        mdp = SymbolicMdp.load(p)
        if (mdp.state_grid_hash, mdp.controller_grid_hash) == (task.state_grid.content_hash(),
                                                               task.controller_grid.content_hash()):
            return mdp
    mdp = build_mdp(task.state_grid, task.controller_grid, task.kernel)
    mdp.save(run.path("mdp.txt"))
    run.record("mdp.txt")
    return mdp


def _write_plan(run: Run, plan) -> None:
    plan.dp.save(run.path("values.npz"))
    run.record("values.npz")
    N1, Z = plan.dp.V.shape[1:]
    for name, table in (("value_table.csv", plan.dp.V[0]), ("activation_0.csv", plan.dp.Gamma[0])):
        with open(run.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["q", "s", "value" if name.startswith("value") else "partition"])
            for q in range(N1):
                for s in range(Z):
                    v = table[q, s]
                    w.writerow([q, s, repr(float(v)) if name.startswith("value") else int(v)])
        run.record(name)
    run.write_json("dfa.json", plan.dfa.to_json())


def _load_library(run: Run, path=None) -> NnLibrary:
    p = Path(path) if path else run.root / "library.json"
    if not p.exists():
        raise ConfigError(f"no library at {p}; run train-library or train-transfer first")
    return NnLibrary.load(p)


def _x0(args, plan) -> np.ndarray:
    """``--x0`` if given, else the center of the initial cell with the highest value."""
    if args.x0:
        return np.asarray([float(v) for v in args.x0.split(",")])
    cells = plan.task.initial_cells()
    return plan.task.state_grid.center(int(cells[int(np.argmax(plan.initial_values()))]))


# --- commands ----------------------------------------------------------------------

def cmd_compile_spec(args) -> int:
    if args.config:
        cfg = TaskConfig.load(args.config)
        text, H = cfg.raw["spec"], args.horizon if args.horizon is not None else cfg.raw["H"]
    else:
        if not args.formula:
            raise ConfigError("give a formula or --config")
        text, H = args.formula, args.horizon
    try:
        dfa = to_dfa(text, H)
    except FormulaSyntaxError as e:
        raise ConfigError(str(e)) from e
    except ValueError as e:
        raise ConfigError(str(e)) from e
    run = Run(args.run_dir)
    run.write_json("dfa.json", dfa.to_json())
    run.close()
    print(json.dumps({"states": dfa.n_states, "atoms": list(dfa.atoms), "horizon": dfa.horizon}))
    return 0


def cmd_build_mdp(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    t = time.perf_counter()
    mdp = _mdp_for(run, task, fresh=True)
    run.close()
    print(json.dumps({"N": mdp.N, "M": mdp.M, "nonzeros": int(mdp.data.size), "seconds": time.perf_counter() - t}))
    return 0


def cmd_build_mdp_demos(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    demos = DemoSet.read_csv(args.demos, task.state_grid.dim)
    run = Run(args.run_dir, cfg)
    t = time.perf_counter()
    mdp = build_mdp_from_demos(task, demos, args.I)
    mdp.save(run.path("mdp.txt"))
    run.record("mdp.txt")
    run.close()
    print(json.dumps({"N": mdp.N, "M": mdp.M, "rows": int(mdp.available.sum()), "seconds": time.perf_counter() - t}))
    return 0


def cmd_plan(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    plan = plan_task(task, mdp=_mdp_for(run, task))
    _write_plan(run, plan)
    run.close()
    vals = plan.initial_values()
    print(json.dumps({"initial_values": vals.tolist(), "states": plan.dfa.n_states,
                      "referenced_pairs": len(plan.referenced_pairs())}))
    return 0


def cmd_train_library(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    lib = train_library(task.state_grid, task.controller_grid, task.kernel.nominal, cfg.cost(), cfg.train_config())
    run.write_text("library.json", lib.dumps())
    run.close()
    print(json.dumps({"trained": len(lib), "failures": len(lib.failures)}))
    return 0 if not lib.failures else 1


def cmd_train_transfer(args) -> int:
    cfg = TaskConfig.load(args.config)
    tasks = [cfg.task()] + [TaskConfig.load(p).task() for p in args.task]
    run = Run(args.run_dir, cfg)
    lib = train_transfer(tasks, cfg.cost(), cfg.train_config())
    run.write_text("library.json", lib.dumps())
    run.close()
    print(json.dumps({"tasks": len(tasks), "trained": len(lib), "failures": len(lib.failures)}))
    return 0 if not lib.failures else 1


def cmd_simulate(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    plan = plan_task(task, mdp=_mdp_for(run, task))
    _write_plan(run, plan)
    x0 = _x0(args, plan)
    out = {"x0": x0.tolist(), "value": plan.value_at(x0), "trials": args.trials}
    if args.trials > 0:
        lib = _load_library(run, args.library)
        if args.transfer:
            rng = np.random.default_rng(cfg.seed("simulate"))
            tr, lib, tlog = runtime_transfer(task, lib, cfg.cost(), cfg.train_config(), x0, rng, plan=plan)
            tr.write_csv(run.path("trajectories/transfer.csv"))
            run.record("trajectories/transfer.csv")
            run.write_text("library.json", lib.dumps())
            run.write_json("transfer.json", {"trained": [[list(k), list(s)] for k, s in tlog.trained],
                                             "status": tr.status})
        planner = ComposedPlanner.from_plan(plan, lib)
        missing = planner.missing()
        if missing:
            raise ConfigError(f"library lacks {len(missing)} networks the plan uses; use --transfer or train-transfer")
        kept: list = []
        res = mc_satisfaction(planner, task.simulator or task.kernel, x0, args.trials, cfg.seed("simulate"), kept)
        for i, tr in enumerate(kept[: args.keep]):
            name = f"trajectories/traj_{i:04d}.csv"
            tr.write_csv(run.path(name))
            run.record(name)
        out.update({"estimate": res.estimate, "ci95": list(res.ci), "accepted": res.accepted,
                    "statuses": res.statuses})
    run.write_json("mc.json", out)
    run.close()
    print(json.dumps(out))
    return 0


def cmd_adapt(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    demos = DemoSet.read_csv(args.demos, task.state_grid.dim)
    run = Run(args.run_dir, cfg)
    res = adapt_partition(task, demos, None, cfg.cost(), task.state_grid.widths, task.controller_grid.widths,
                          args.I, args.p, cfg.train_config(), max_refinements=args.max_refinements,
                          train_nets=not args.no_train)
    run.write_text("library.json", res.library.dumps())
    _write_plan(run, res.plan)
    out = {"refinements": res.refinements, "I": res.I, "value": res.value, "achieved": res.achieved,
           "history": res.history}
    run.write_json("adapt.json", out)
    run.close()
    print(json.dumps(out))
    return 0


def cmd_bounds(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    plan = plan_task(task, mdp=_mdp_for(run, task))
    lib = NnLibrary.load(run.root / "library.json") if (run.root / "library.json").exists() else None
    p = estimate_params(task, plan.dfa.n_states, lib, args.samples, np.random.default_rng(cfg.seed("bounds")))
    v0 = plan.value_at(_x0(args, plan))
    rep = bound_report(v0, p)
    run.write_text("bounds.json", dumps_report(rep) + "\n")
    run.close()
    print(json.dumps({k: rep[k] for k in ("delta_nn", "delta_star", "envelope", "value")}))
    return 0


def cmd_audit(args) -> int:
    cfg = TaskConfig.load(args.config)
    task = cfg.task()
    run = Run(args.run_dir, cfg)
    lib = _load_library(run, args.library)
    lib.check_grids(task.state_grid, task.controller_grid)
    bad = audit_library(lib, task.state_grid, task.controller_grid)
    out = {"checked": len(lib), "violations": [{"q": q, "P": p, "regions": v} for q, p, v in bad]}
    run.write_json("audit.json", out)
    run.close()
    print(json.dumps({"checked": len(lib), "violations": len(bad)}))
    return 0 if not bad else 1


def cmd_example_config(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    desk_workspace().save(out / "workspace.json")
    (out / "task.json").write_text(json.dumps(desk_config("workspace.json"), indent=1) + "\n")
    moved = desk_config("workspace_moved.json")
    desk_workspace(moved=True).save(out / "workspace_moved.json")
    (out / "task_moved.json").write_text(json.dumps(moved, indent=1) + "\n")
    print(json.dumps({"written": sorted(p.name for p in out.iterdir())}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurosym", description="Certified local ReLU controllers composed by DP.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, config=True, help=""):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True)
        p.add_argument("--run-dir", default="run")
        p.set_defaults(fn=fn)
        return p

    p = sub.add_parser("compile-spec", help="compile a formula to a DFA")
    p.add_argument("formula", nargs="?")
    p.add_argument("--horizon", type=int)
    p.add_argument("--config")
    p.add_argument("--run-dir", default="run")
    p.set_defaults(fn=cmd_compile_spec)
    add("build-mdp", cmd_build_mdp, help="build the full abstraction")
    p = add("build-mdp-demos", cmd_build_mdp_demos, help="demonstration-guided abstraction")
    p.add_argument("--demos", required=True)
    p.add_argument("--I", type=int, required=True)
    add("plan", cmd_plan, help="abstraction, product and DP")
    add("train-library", cmd_train_library, help="train every (cell, partition) pair")
    p = add("train-transfer", cmd_train_transfer, help="train the pairs the tasks' plans reference")
    p.add_argument("--task", action="append", default=[], help="additional task config")
    p = add("simulate", cmd_simulate, help="closed-loop Monte Carlo")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--x0")
    p.add_argument("--library")
    p.add_argument("--keep", type=int, default=10)
    p.add_argument("--transfer", action="store_true", help="fine-tune missing nets along one rollout first")
    p = add("adapt", cmd_adapt, help="adaptive grid refinement")
    p.add_argument("--demos", required=True)
    p.add_argument("--I", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--max-refinements", type=int, default=4)
    p.add_argument("--no-train", action="store_true")
    p = add("bounds", cmd_bounds, help="error-bound report")
    p.add_argument("--x0")
    p.add_argument("--samples", type=int, default=16)
    p = add("audit", cmd_audit, help="membership sweep over a library")
    p.add_argument("--library")
    p = sub.add_parser("example-config", help="write the desk scenario configs")
    p.add_argument("--out", default="desk")
    p.set_defaults(fn=cmd_example_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CapabilityError as e:
        print(f"capability limit: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
