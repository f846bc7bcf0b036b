"""Energy, mass and positivity diagnostics and convergence-order studies.

The discrete energy balance of one step is checked through

    slack = [KE + SE]_new - [KE + SE]_old + tau * (dissipation - gravity power)

which the implicit schemes make equal to ``residual_work - convexity_gap``:
``residual_work`` pairs the Newton residual with the test vector
``(v, -|v|^2/2, dphi)`` and vanishes for an exact solve, and the convexity
gap (kinetic and stored) is non-negative.  Dissipations are recomputed with
the steppers' own stencils.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .materials.yosida import YosidaRegularizedEnergy
from .stepper_large import (StateLarge, _large_terms, dissipation_large, effective_material, step_large,
                            stored_energy_large)
from .stepper_small import (SchemeParams, StateSmall, _small_terms, dissipation_small, gravity_field,
                            resolve_rho_max, step_small, tolerance_scale)
from .tensor import det, sym_pack, sym_unpack

__all__ = [
    "EnergyReport", "energy_report", "step_report", "mass", "density_bounds", "jacobian_drift", "kinetic_energy",
    "stored_energy", "ConvergenceProblem", "ConvergenceResult", "convergence_study", "observed_order",
    "CSV_COLUMNS", "report_row", "write_csv", "read_csv", "audit_rows", "state_l2",
]

DISSIPATION_KEYS = ("stokes", "hyper", "maxwell", "eps", "delta_grad")


@dataclass
class EnergyReport:
    """Energies (J), dissipation rates and gravity power (J/s), balance terms (J), bounds."""

    time: float
    tau: float
    kinetic: float
    stored: float
    kinetic_old: float
    stored_old: float
    dissipation: dict
    gravity_power: float
    inequality_slack: float
    residual_work: float
    convexity_gap: float
    tolerance: float
    mass: float
    rho_min: float
    rho_max: float
    j_min: float = math.nan
    drift: float = math.nan
    cap_active: bool = False

    @property
    def total(self) -> float:
        return self.kinetic + self.stored

    @property
    def total_dissipation(self) -> float:
        return float(sum(self.dissipation.values()))

    def passes(self, factor: float = 10.0) -> bool:
        return self.inequality_slack <= factor * self.tolerance


# --- elementary diagnostics ---------------------------------------------------
def mass(state) -> float:
    """``sum rho h^d``."""
    return state.grid.integrate(state.rho)


def density_bounds(state):
    return float(np.min(state.rho)), float(np.max(state.rho))


def jacobian_drift(state: StateLarge) -> float:
    """``|J - det F|_inf``."""
    return float(np.max(np.abs(state.J - det(state.F))))


def kinetic_energy(state) -> float:
    return state.grid.integrate(np.sum(state.p_mom * state.p_mom, axis=-1) / (2.0 * state.rho))


def stored_energy(state, material) -> float:
    if isinstance(state, StateSmall):
        return state.grid.integrate(material.value(sym_unpack(state.E)))
    return stored_energy_large(state, material)


def _step_material(old, material):
    """Regularization in force for the step leaving ``old`` (the cap floor follows the old J)."""
    if isinstance(material, YosidaRegularizedEnergy):
        reg = effective_material(material)
        if reg.mode == "simplified-cap":
            reg = reg.with_floor(0.5 * float(np.min(old.J)))
        return reg
    return material


# --- the per-step report --------------------------------------------------------
def energy_report(old, new, params: SchemeParams, material, g=None) -> EnergyReport:
    """Discrete energy balance of the step ``old -> new``.

    ``material`` is the :class:`IsotropicQuadraticEnergy` for small-model
    states and the :class:`YosidaRegularizedEnergy` for large-model states.
    ``tolerance`` converts the Newton stopping target into energy units via
    the test vector, so ``|residual_work| <= tolerance`` for a converged step.
    """
    grid = old.grid
    params = resolve_rho_max(params, old.rho)
    tau = new.time - old.time if new.time > old.time else params.tau
    sp = replace(params, tau=tau)
    gvec = gravity_field(g, old.time + 0.5 * tau, grid)
    reg = _step_material(old, material)
    v = new.velocity
    w_p = v
    w_rho = -0.5 * np.sum(v * v, axis=-1)
    vol = grid.cell_volume

    if isinstance(new, StateSmall):
        diss = dissipation_small(new, sp, material)
        x_new, x_old = new.pack(), old.pack()
        r = _small_terms(grid, x_new, x_old, sp, gvec, material)
        r0 = _small_terms(grid, x_old, x_old, sp, gvec, material)
        n = grid.ncell
        dphi = material.grad(sym_unpack(new.E))
        r_E = sym_unpack(r[4 * n:].reshape(grid.shape + (6,)))
        work_u = grid.inner(dphi, r_E)
        w_u = sym_pack(dphi) * np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
        j_min = drift = math.nan
        cap = False
        stored_new, stored_old = stored_energy(new, material), stored_energy(old, material)
    else:
        base = reg.base
        with_h = base.has_h
        diss = dissipation_large(new, sp, reg)
        x_new, x_old = new.pack(with_h), old.pack(with_h)
        Pi = new.Pi if sp.nu > 0 else None
        r = _large_terms(grid, x_new, x_old, sp, gvec, reg, Pi, with_h)
        r0 = _large_terms(grid, x_old, x_old, sp, gvec, reg, Pi, with_h)
        n = grid.ncell
        U = base.pack(new.F, new.J, new.H if with_h else None)
        S = reg.grad(U)
        rF = r[4 * n:13 * n].reshape(grid.shape + (9,))
        rJ = r[13 * n:14 * n].reshape(grid.shape + (1,))
        parts = [rF]
        if with_h:
            parts.append(r[14 * n:23 * n].reshape(grid.shape + (9,)))
        parts.append(rJ)
        r_U = np.concatenate(parts, axis=-1)
        work_u = grid.inner(S, r_U)
        w_u = S
        j_min = float(np.min(new.J))
        drift = jacobian_drift(new)
        cap = bool(np.any(reg.cap_active(U))) if reg.mode == "simplified-cap" else False
        stored_new = grid.integrate(reg.value(U))
        U_old = base.pack(old.F, old.J, old.H if with_h else None)
        stored_old = grid.integrate(reg.value(U_old))

    r_rho = r[:n].reshape(grid.shape)
    r_p = r[n:4 * n].reshape(grid.shape + (3,))
    work = grid.inner(w_p, r_p) + grid.inner(w_rho, r_rho) + work_u

    ke_new, ke_old = kinetic_energy(new), kinetic_energy(old)
    power = grid.inner(new.rho[..., None] * gvec, v)
    slack = ke_new + stored_new - ke_old - stored_old + tau * (sum(diss.values()) - power)
    wnorm = math.sqrt(float(np.sum(w_p * w_p) + np.sum(w_rho * w_rho) + np.sum(w_u * w_u)))
    target = sp.tol_abs * tolerance_scale(x_old) + sp.tol_rel * float(np.linalg.norm(r0))
    rmin, rmax = density_bounds(new)
    return EnergyReport(new.time, tau, ke_new, stored_new, ke_old, stored_old, diss, power, slack, work,
                        work - slack, wnorm * target * vol, mass(new), rmin, rmax, j_min, drift, cap)


def step_report(stats, params: SchemeParams, material, g=None) -> EnergyReport:
    """Energy report of an accepted step, combining the substeps of any halving.

    Each substep satisfies its own discrete balance, so slack, residual work,
    convexity gap and tolerance add up; rates are time-averaged over the step.
    """
    reps = [energy_report(a, b, params, material, g) for a, b in stats.substates]
    if len(reps) == 1:
        return reps[0]
    first, last = reps[0], reps[-1]
    tau = sum(r.tau for r in reps)
    diss = {k: sum(r.tau * r.dissipation.get(k, 0.0) for r in reps) / tau for k in DISSIPATION_KEYS}
    return replace(last, tau=tau, kinetic_old=first.kinetic_old, stored_old=first.stored_old, dissipation=diss,
                   gravity_power=sum(r.tau * r.gravity_power for r in reps) / tau,
                   inequality_slack=sum(r.inequality_slack for r in reps),
                   residual_work=sum(r.residual_work for r in reps),
                   convexity_gap=sum(r.convexity_gap for r in reps), tolerance=sum(r.tolerance for r in reps),
                   rho_min=min(r.rho_min for r in reps), rho_max=max(r.rho_max for r in reps),
                   j_min=min(r.j_min for r in reps), drift=max(r.drift for r in reps),
                   cap_active=any(r.cap_active for r in reps))


# --- CSV -----------------------------------------------------------------------
CSV_COLUMNS = (
    "step", "time", "tau", "kinetic", "stored", "total",
    "diss_stokes", "diss_hyper", "diss_maxwell", "diss_eps", "diss_delta_grad",
    "gravity_power", "inequality_slack", "residual_work", "convexity_gap", "tolerance",
    "mass", "rho_min", "rho_max", "j_min", "drift", "cap_active", "newton_iterations", "halvings",
)
_INT_COLUMNS = ("step", "cap_active", "newton_iterations", "halvings")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def report_row(step: int, rep: EnergyReport, iterations: int = 0, halvings: int = 0) -> dict:
    row = {"step": step, "time": rep.time, "tau": rep.tau, "kinetic": rep.kinetic, "stored": rep.stored,
           "total": rep.total}
    for key in DISSIPATION_KEYS:
        row["diss_" + key] = rep.dissipation.get(key, 0.0)
    row.update(gravity_power=rep.gravity_power, inequality_slack=rep.inequality_slack,
               residual_work=rep.residual_work, convexity_gap=rep.convexity_gap, tolerance=rep.tolerance,
               mass=rep.mass, rho_min=rep.rho_min, rho_max=rep.rho_max, j_min=rep.j_min, drift=rep.drift,
               cap_active=rep.cap_active, newton_iterations=iterations, halvings=halvings)
    return row


def write_csv(rows: Sequence[dict], path=None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for row in rows:
        wr.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path_or_text) -> list:
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, encoding="ascii") as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError("CSV header does not match the audit format")
    return [{k: int(v) if k in _INT_COLUMNS else float(v) for k, v in r.items()} for r in rows]


def audit_rows(rows: Sequence[dict], factor: float = 10.0) -> dict:
    """Recompute the verdicts of a run from its CSV rows."""
    slack = np.array([r["inequality_slack"] for r in rows])
    tol = np.array([r["tolerance"] for r in rows])
    masses = np.array([r["mass"] for r in rows])
    ok = slack <= factor * tol
    rho_min = min((r["rho_min"] for r in rows), default=math.nan)
    j_min = min((r["j_min"] for r in rows if not math.isnan(r["j_min"])), default=math.nan)
    return {
        "steps": len(rows),
        "inequality_ok": bool(np.all(ok)),
        "inequality_violations": int(np.sum(~ok)),
        "slack_max": float(np.max(slack)) if len(rows) else 0.0,
        "slack_median": float(np.median(slack)) if len(rows) else 0.0,
        "mass_drift_max": float(np.max(np.abs(np.diff(masses)) / np.abs(masses[:-1]))) if len(rows) > 1 else 0.0,
        "rho_min": rho_min,
        "j_min": j_min,
    }


# --- convergence studies ----------------------------------------------------------
@dataclass
class ConvergenceProblem:
    """A fixed-horizon run: initial state, scheme, material, gravity and final time."""

    initial: object
    params: SchemeParams
    material: object
    final_time: float
    g: object = None

    def run(self, tau: float):
        nsteps = self.final_time / tau
        k = int(round(nsteps))
        if k < 1 or abs(nsteps - k) > 1e-9 * max(1.0, nsteps):
            raise ValueError(f"tau={tau} does not divide the final time {self.final_time}")
        sp = replace(self.params, tau=tau)
        state = self.initial
        for _ in range(k):
            if isinstance(state, StateSmall):
                state, _ = step_small(state, sp, self.g, self.material)
            else:
                state, _ = step_large(state, sp, self.material, self.g)
        return state


def state_l2(a, b) -> float:
    """Discrete L2 distance of two states over all evolved fields."""
    fa, fb = a.fields(), b.fields()
    s = 0.0
    for name, (_, arr) in fa.items():
        d = arr - fb[name][1]
        s += float(np.sum(d * d))
    return math.sqrt(s * a.grid.cell_volume)


def observed_order(coarse: float, fine: float) -> float:
    """``log2(coarse / fine)`` for a halving; nan when undefined."""
    if not (coarse > 0 and fine > 0):
        return math.nan
    return math.log2(coarse / fine)


@dataclass
class ConvergenceResult:
    taus: list
    states: list
    successive: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    errors_vs_finest: list = field(default_factory=list)
    order_vs_finest: float = math.nan
    field_orders: dict = field(default_factory=dict)
    drifts: list = field(default_factory=list)
    drift_orders: list = field(default_factory=list)

    @property
    def order(self) -> float:
        return min(self.orders) if self.orders else math.nan

    @property
    def drift_order(self) -> float:
        return min(self.drift_orders) if self.drift_orders else math.nan

    def summary(self) -> dict:
        out = {"taus": self.taus, "successive": self.successive, "orders": self.orders,
               "errors_vs_finest": self.errors_vs_finest, "order_vs_finest": self.order_vs_finest,
               "field_orders": self.field_orders}
        if self.drifts:
            out.update(drifts=self.drifts, drift_orders=self.drift_orders)
        return out


def convergence_study(problem: ConvergenceProblem | Callable, tau_list: Sequence[float]) -> ConvergenceResult:
    """Self-convergence under successive halving of tau.

    The observed order of each halving is ``log2(|u(4t) - u(2t)| / |u(2t) - u(t)|)``
    from successive differences; errors against the finest run are reported
    as well.  ``problem`` is a :class:`ConvergenceProblem` or any callable
    ``tau -> final state``.
    """
    taus = sorted((float(t) for t in tau_list), reverse=True)
    if len(taus) < 3:
        raise ValueError("a convergence study needs at least three time steps")
    for a, b in zip(taus, taus[1:]):
        if abs(a / b - 2.0) > 1e-12:
            raise ValueError("time steps must halve successively")
    run = problem.run if isinstance(problem, ConvergenceProblem) else problem
    states = [run(t) for t in taus]
    res = ConvergenceResult(taus, states)
    res.successive = [state_l2(a, b) for a, b in zip(states, states[1:])]
    res.orders = [observed_order(a, b) for a, b in zip(res.successive, res.successive[1:])]
    ref = states[-1]
    res.errors_vs_finest = [state_l2(s, ref) for s in states[:-1]]
    if len(res.errors_vs_finest) >= 2:
        res.order_vs_finest = observed_order(res.errors_vs_finest[-2], res.errors_vs_finest[-1])
    for name in ref.fields():
        d = []
        for a, b in zip(states, states[1:]):
            x, y = a.fields()[name][1], b.fields()[name][1]
            d.append(math.sqrt(float(np.sum((x - y) ** 2)) * ref.grid.cell_volume))
        res.field_orders[name] = [observed_order(a, b) for a, b in zip(d, d[1:])]
    if isinstance(ref, StateLarge):
        res.drifts = [jacobian_drift(s) for s in states]
        res.drift_orders = [observed_order(a, b) for a, b in zip(res.drifts, res.drifts[1:])]
    return res


def as_dict(rep: EnergyReport) -> dict:
    return asdict(rep)
