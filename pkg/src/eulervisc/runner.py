"""Run orchestration: step a configured problem to its final time and emit artifacts.

Artifacts in the output directory:

``audit.csv``      one row per step (header :data:`eulervisc.audit.CSV_COLUMNS`)
``summary.txt``    ``key=value`` lines; ``status`` is ``success`` or ``failure``
``snap_NNNNNN.evs`` snapshots every ``snapshot_every`` steps (0 disables)
``final.evs``      last accepted state (also written when a run fails)
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .audit import audit_rows, report_row, step_report, write_csv
from .config import RunConfig, build_gravity, build_initial, build_material
from .fields import write_snapshot
from .stepper_large import step_large
from .stepper_small import StepFailure, resolve_rho_max, step_small

__all__ = ["RunResult", "run", "write_summary", "read_summary"]

@dataclass
class RunResult:
    status: str
    summary: dict
    rows: list = field(default_factory=list)
    state: object = None
    out_dir: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "success"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v).replace("\n", " ")


def write_summary(summary: dict, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in summary.items():
            fh.write(f"{k}={_fmt(v)}\n")


def read_summary(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def _snapshot(path, state, extra=None):
    write_snapshot(path, state.grid, state.fields(), state.time, extra)


def run(cfg: RunConfig, out_dir=None, snapshot_every: int | None = None, quiet: bool = True) -> RunResult:
    """Run ``cfg`` to its final time.

    Returns a :class:`RunResult`; nothing is raised for step failures, which
    end the run with ``status = failure``, the halving log in the summary
    and the last accepted state dumped to ``final.evs``.
    """
    cadence = cfg.snapshot_every if snapshot_every is None else snapshot_every
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    material = build_material(cfg)
    g = build_gravity(cfg)
    state = build_initial(cfg)
    # fix the cut-off threshold from the initial density for the whole run
    params = resolve_rho_max(cfg.params, state.rho)

    def say(msg):
        if not quiet:
            print(msg, file=sys.stdout, flush=True)

    if out_dir is not None and cadence > 0:
        _snapshot(os.path.join(out_dir, f"snap_{0:06d}.evs"), state)

    rows = []
    bound_violations = 0
    band_entered = False
    failure = None
    halvings = iterations = cap_steps = 0
    halving_log = []
    for k in range(1, cfg.steps + 1):
        try:
            if cfg.model == "small":
                new, stats = step_small(state, params, g, material)
            else:
                new, stats = step_large(state, params, material, g)
        except StepFailure as exc:
            failure = exc
            break
        rep = step_report(stats, params, material, g)
        rows.append(report_row(k, rep, stats.iterations, stats.halvings))
        halvings += stats.halvings
        halving_log.extend(stats.halving_log)
        iterations += stats.iterations
        cap_steps += int(rep.cap_active)
        band_entered = band_entered or stats.band_entered
        if not (rep.rho_min > 0 and rep.rho_max <= params.rho_max + 1.0):
            bound_violations += 1
        if cfg.model == "large" and not rep.j_min > 0:
            bound_violations += 1
        state = new
        say(f"step {k:5d} t={state.time:.6g} E={rep.total:.12e} slack={rep.inequality_slack:.3e} "
            f"newton={stats.iterations} halvings={stats.halvings}")
        if out_dir is not None and cadence > 0 and k % cadence == 0:
            _snapshot(os.path.join(out_dir, f"snap_{k:06d}.evs"), state)

    verdict = audit_rows(rows)
    ok = failure is None and bound_violations == 0 and not band_entered and verdict["inequality_ok"]
    summary = {
        "status": "success" if ok else "failure",
        "model": cfg.model,
        "material": cfg.material_name,
        "regularization": cfg.regularization if cfg.model == "large" else "none",
        "grid": "x".join(str(n) for n in cfg.grid.n),
        "tau": cfg.params.tau,
        "steps_requested": cfg.steps,
        "steps_completed": len(rows),
        "final_time": state.time,
        "kinetic": rows[-1]["kinetic"] if rows else math.nan,
        "stored": rows[-1]["stored"] if rows else math.nan,
        "total": rows[-1]["total"] if rows else math.nan,
        "inequality_ok": verdict["inequality_ok"],
        "inequality_violations": verdict["inequality_violations"],
        "slack_max": verdict["slack_max"],
        "slack_median": verdict["slack_median"],
        "mass_drift_max": verdict["mass_drift_max"],
        "bound_violations": bound_violations,
        "rho_min": verdict["rho_min"],
        "rho_max_threshold": params.rho_max,
        "band_entered": band_entered,
        "j_min": verdict["j_min"],
        "cap_active_steps": cap_steps,
        "newton_iterations": iterations,
        "halvings": halvings,
        "outside_regime": ";".join(cfg.flags) if cfg.flags else "none",
        "seed": cfg.seed,
    }
    if failure is not None:
        summary["failure_reason"] = str(failure)
        halving_log.extend(failure.diagnostics.get("halving_log", []))
        for name, val in failure.diagnostics.get("breakdown", {}).items():
            summary[f"residual_{name}"] = val
        say(f"FAILURE at t={state.time:.6g}: {failure}")
    if halving_log:
        summary["halving_log"] = " | ".join(halving_log)
    if out_dir is not None:
        write_csv(rows, os.path.join(out_dir, cfg.csv_name))
        write_summary(summary, os.path.join(out_dir, "summary.txt"))
        _snapshot(os.path.join(out_dir, "final.evs"), state, {"status": summary["status"]})
    return RunResult(summary["status"], summary, rows, state, out_dir)
