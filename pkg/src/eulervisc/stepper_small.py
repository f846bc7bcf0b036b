"""Implicit step of the regularized small-strain viscoelastic model.

Unknowns per cell are the density ``rho``, the momentum ``p`` and the
symmetric elastic strain ``E`` (six Voigt entries); the velocity is
eliminated as ``v = p / rho``.  One step solves, with backward Euler,

    rho - rho_old = tau div(q - m),          q = delta |grad rho|^(r-2) grad rho,  m = K(rho) p
    p - p_old     = tau [div(phi'(E) + D e(v)) + c(E) - conv(m, v) - comp(q, v)
                         - hyper(v) + rho g - eps |v|^(p-2) v]
    E - E_old     = tau [e(v) - R dev phi'(E) - b_zj(v, E) + delta lap E]

where ``c_j = phi'(E) : D_j E`` is the chain-rule form of ``grad phi(E)`` and
``conv``, ``comp`` are the skew-symmetric splittings of the momentum
transport and of the compensating term ``(grad v) q``.  With the
summation-by-parts operators of :mod:`eulervisc.fields` every exchange term
cancels exactly when the equations are tested with ``(v, -|v|^2/2, phi'(E))``,
so the discrete energy balance only leaves the convexity gaps and the
Newton residual.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fields import BoundaryConditionError, Grid, _pow_weight
from .materials.small import IsotropicQuadraticEnergy
from .materials.yosida import ProxConvergenceError
from .solver import ConvergenceError, InfeasibleIterate, solve_coupled
from .tensor import b_zj, dev, sym, sym_pack, sym_unpack

__all__ = [
    "SchemeParams", "StateSmall", "SolveStats", "StepFailure", "MaximumPrincipleError",
    "cutoff_K", "cutoff_K_rho", "cutoff_lipschitz", "residual_small", "step_small", "dissipation_small",
    "gravity_field", "make_initial_small", "solve_coupled",
]

log = logging.getLogger(__name__)


# --- parameters -------------------------------------------------------------
@dataclass(frozen=True)
class SchemeParams:
    """Time step, regularization weights, viscosities and solver settings.

    ``G_M = inf`` (the default) is the Kelvin-Voigt limit ``R = 1 / G_M = 0``.
    ``rho_max = None`` is resolved to four times the initial maximum density
    by :func:`resolve_rho_max`.
    """

    tau: float = 1e-3
    eps: float = 1e-6
    delta: float = 1e-4
    mu: float = 1e-6
    p_exp: float = 4.0
    q_exp: float = 4.0
    r_exp: float = 4.0
    rho_max: float | None = None
    K_V: float = 0.0
    G_V: float = 0.0
    G_M: float = math.inf
    nu: float = 0.0
    tol_rel: float = 1e-10
    tol_abs: float = 1e-12
    max_iter: int = 50
    max_halvings: int = 4
    allow_unsafe: bool = False

    def __post_init__(self):
        hard = []
        if not self.tau > 0:
            hard.append("time step tau > 0")
        if not self.G_M > 0:
            hard.append("Maxwell modulus G_M > 0 (use inf for R = 0)")
        for name in ("K_V", "G_V", "nu", "mu"):
            if getattr(self, name) < 0:
                hard.append(f"{name} >= 0")
        if self.rho_max is not None and not self.rho_max > 0:
            hard.append("cut-off threshold rho_max > 0")
        if hard:
            raise ValueError("invalid scheme parameters: " + "; ".join(hard))
        bad = self.unsafe_flags()
        if bad and not self.allow_unsafe:
            raise ValueError("scheme parameters outside the analysed regime: " + "; ".join(bad))

    @property
    def R(self) -> float:
        return 0.0 if math.isinf(self.G_M) else 1.0 / self.G_M

    def unsafe_flags(self, large: bool = False) -> list:
        """Names of the analysed-regime hypotheses these parameters violate."""
        out = []
        if not self.p_exp > 3:
            out.append("hyperviscosity exponent p > 3")
        if not self.r_exp > 3:
            out.append("density-diffusion exponent r > 3")
        if large and self.nu > 0 and not self.q_exp > 3:
            out.append("plastic-gradient exponent q > 3")
        if self.eps < 0:
            out.append("regularization eps >= 0")
        if self.delta < 0:
            out.append("regularization delta >= 0")
        return out

    def outside_regime(self) -> list:
        """Zero weights the analysis excludes but experiments may use (flagged, not rejected)."""
        return [name for name in ("eps", "delta", "mu") if getattr(self, name) == 0]


def resolve_rho_max(params: SchemeParams, rho0) -> SchemeParams:
    if params.rho_max is not None:
        return params
    return replace(params, rho_max=4.0 * float(np.max(rho0)))


# --- cut-off ------------------------------------------------------------------
def cutoff_K(rho, rho_max):
    """1 on [0, rho_max], 0 below 0 and from rho_max + 1 on, C^1 smoothstep between."""
    rho = np.asarray(rho, dtype=float)
    s = np.clip(rho - rho_max, 0.0, 1.0)
    k = 1.0 - s * s * (3.0 - 2.0 * s)
    return np.where(rho < 0, 0.0, k)


def cutoff_K_rho(rho, rho_max):
    """``K(rho) rho``: non-negative and Lipschitz (see :func:`cutoff_lipschitz`)."""
    rho = np.asarray(rho, dtype=float)
    return cutoff_K(rho, rho_max) * rho


def cutoff_lipschitz(rho_max: float) -> float:
    """Lipschitz constant of ``rho -> K(rho) rho``.

    On the band ``s = rho - rho_max`` in (0, 1) the derivative is the cubic
    ``1 - 6 rho_max s + (6 rho_max - 9) s^2 + 8 s^3``; its extrema are at the
    roots of the quadratic derivative.
    """
    poly = np.polynomial.Polynomial([1.0, -6.0 * rho_max, 6.0 * rho_max - 9.0, 8.0])
    cand = [0.0, 1.0] + [r.real for r in poly.deriv().roots() if abs(r.imag) < 1e-12 and 0 < r.real < 1]
    return float(max(1.0, max(abs(poly(s)) for s in cand)))


# --- states -----------------------------------------------------------------
@dataclass
class StateSmall:
    """Density, momentum and Voigt-packed elastic strain on a grid."""

    grid: Grid
    rho: np.ndarray
    p_mom: np.ndarray
    E: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        shp = self.grid.shape
        self.rho = np.asarray(self.rho, dtype=float)
        self.p_mom = np.asarray(self.p_mom, dtype=float)
        self.E = np.asarray(self.E, dtype=float)
        for name, arr, tail in (("rho", self.rho, ()), ("p_mom", self.p_mom, (3,)), ("E", self.E, (6,))):
            if arr.shape != shp + tail:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shp + tail}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def velocity(self):
        return self.p_mom / self.rho[..., None]

    def pack(self):
        return np.concatenate([self.rho.ravel(), self.p_mom.ravel(), self.E.ravel()])

    @classmethod
    def unpack(cls, grid: Grid, x, time: float = 0.0):
        return cls(grid, *_split_small(grid, x), time=time)

    def fields(self) -> dict:
        return {"rho": ("scalar", self.rho), "p_mom": ("vector", self.p_mom), "E": ("sym", self.E)}

    def copy(self):
        return StateSmall(self.grid, self.rho.copy(), self.p_mom.copy(), self.E.copy(), self.time)


def _split_small(grid, x):
    n = grid.ncell
    shp = grid.shape
    return x[:n].reshape(shp), x[n:4 * n].reshape(shp + (3,)), x[4 * n:10 * n].reshape(shp + (6,))


def make_initial_small(grid: Grid, rho0, v0, E0=None, time: float = 0.0) -> StateSmall:
    rho0 = np.broadcast_to(np.asarray(rho0, dtype=float), grid.shape).copy()
    if not np.min(rho0) > 0:
        raise ValueError("initial density must satisfy min rho0 > 0")
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), grid.shape + (3,))
    E0 = np.zeros(grid.shape + (6,)) if E0 is None else np.broadcast_to(np.asarray(E0, dtype=float), grid.shape + (6,))
    return StateSmall(grid, rho0, rho0[..., None] * v0, E0.copy(), time)


# --- shared transport / momentum pieces -------------------------------------
def gravity_field(g, t: float, grid: Grid):
    """Gravity at time ``t``: None, a constant vector, a field, or ``g(t)`` returning either."""
    if g is None:
        return np.zeros(grid.shape + (3,))
    if callable(g):
        g = g(t)
    return np.broadcast_to(np.asarray(g, dtype=float), grid.shape + (3,))


def _check_periodic(grid):
    if grid.topology != "periodic":
        raise BoundaryConditionError("the implicit steppers are implemented for periodic grids only")


def density_fluxes(grid, rho, p, params):
    """Diffusive flux ``q`` and cut-off transport flux ``m``."""
    grho = grid.grad(rho)
    if params.delta > 0:
        q = params.delta * _pow_weight(grho, params.r_exp, 1) * grho
    else:
        q = np.zeros_like(grho)
    m = cutoff_K(rho, params.rho_max)[..., None] * p
    return q, m


def stokes_stress(eps_v, params):
    tr = np.trace(eps_v, axis1=-2, axis2=-1)
    return params.K_V * tr[..., None, None] * np.eye(3) + 2.0 * params.G_V * dev(eps_v)


def _skew_flux(grid, gv, v, w, sign):
    """``1/2 [w_j D_j v_i + D_j(w_j v_i) + sign v_i D_j w_j]``."""
    a = np.einsum("...ij,...j->...i", gv, w)
    b = grid.div(v[..., :, None] * w[..., None, :])
    c = v * grid.div(w)[..., None]
    return 0.5 * (a + b + sign * c)


def momentum_rhs(grid, rho, v, gv, q, m, stress, chain, params, gvec):
    """Right-hand side of the momentum equation (everything but the time difference)."""
    eps_v = sym(gv)
    out = grid.div(stress + stokes_stress(eps_v, params)) + chain
    out -= _skew_flux(grid, gv, v, m, +1.0)
    out -= _skew_flux(grid, gv, v, q, -1.0)
    out -= grid.hyperstress_apply(v, params.mu, params.p_exp, allow_unsafe=params.allow_unsafe)
    out += rho[..., None] * gvec
    if params.eps > 0:
        out -= params.eps * _pow_weight(v, params.p_exp, 1) * v
    return out


def velocity_dissipation(grid, v, gv, params) -> dict:
    """Stokes, hyperviscous and ``eps |v|^p`` dissipation rates."""
    eps_v = sym(gv)
    stokes = grid.inner(stokes_stress(eps_v, params), eps_v)
    if params.mu > 0:
        hv = grid.hessian(v)
        hyper = params.mu * grid.integrate(np.sum(hv * hv, axis=(-3, -2, -1)) ** (params.p_exp / 2.0))
    else:
        hyper = 0.0
    epsd = params.eps * grid.integrate(np.sum(v * v, axis=-1) ** (params.p_exp / 2.0)) if params.eps > 0 else 0.0
    return {"stokes": stokes, "hyper": hyper, "eps": epsd}


# --- small-model residual ---------------------------------------------------
def _small_terms(grid, x, old_x, params, gvec, material):
    rho, p, E6 = _split_small(grid, x)
    if not np.all(rho > 0):
        raise InfeasibleIterate(f"nonpositive density inside Newton (min rho = {np.min(rho):.3e})")
    rho_o, p_o, E6_o = _split_small(grid, old_x)
    tau = params.tau
    v = p / rho[..., None]
    gv = grid.grad(v)
    E = sym_unpack(E6)
    dphi = material.grad(E)
    gE = grid.grad(E)
    chain = np.einsum("...ij,...ijk->...k", dphi, gE)
    transport = np.einsum("...ijk,...k->...ij", gE, v)
    q, m = density_fluxes(grid, rho, p, params)

    r_rho = rho - rho_o - tau * grid.div(q - m)
    r_p = p - p_o - tau * momentum_rhs(grid, rho, v, gv, q, m, dphi, chain, params, gvec)
    rhs_E = sym(gv) - b_zj(gv, transport, E)
    if params.R > 0:
        rhs_E = rhs_E - params.R * dev(dphi)
    if params.delta > 0:
        rhs_E = rhs_E + params.delta * grid.laplacian(E)
    r_E = E - sym_unpack(E6_o) - tau * rhs_E
    return np.concatenate([r_rho.ravel(), r_p.ravel(), sym_pack(r_E).ravel()])


def _blocks_small(grid):
    n = grid.ncell
    return [("rho", slice(0, n)), ("p", slice(n, 4 * n)), ("E", slice(4 * n, 10 * n))]


def residual_small(new: StateSmall, old: StateSmall, params: SchemeParams, g, material: IsotropicQuadraticEnergy):
    """Concatenated cell residuals ``[rho | p | E]`` of one step from ``old`` to ``new``.

    ``g`` is evaluated at the step midpoint.  Raises :class:`InfeasibleIterate`
    where ``rho <= 0``.
    """
    grid = old.grid
    _check_periodic(grid)
    if params.rho_max is None:
        raise ValueError("rho_max must be resolved before stepping")
    gvec = gravity_field(g, old.time + 0.5 * params.tau, grid)
    return _small_terms(grid, new.pack(), old.pack(), params, gvec, material)


def dissipation_small(state: StateSmall, params: SchemeParams, material: IsotropicQuadraticEnergy) -> dict:
    grid = state.grid
    v = state.velocity
    gv = grid.grad(v)
    out = velocity_dissipation(grid, v, gv, params)
    E = sym_unpack(state.E)
    dphi = material.grad(E)
    out["maxwell"] = params.R * grid.inner(dev(dphi), dev(dphi)) if params.R > 0 else 0.0
    if params.delta > 0:
        out["delta_grad"] = params.delta * grid.inner(grid.grad(dphi), grid.grad(E))
    else:
        out["delta_grad"] = 0.0
    return out


# --- stepping ---------------------------------------------------------------
class StepFailure(RuntimeError):
    """A step failed after all fallbacks; ``diagnostics`` says where it stalled."""

    def __init__(self, message, diagnostics=None, state=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.state = state


class MaximumPrincipleError(StepFailure):
    pass


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = 0.0
    residual0: float = 0.0
    target: float = 0.0
    damping_events: int = 0
    linear_iterations: int = 0
    picard_sweeps: int = 0
    halvings: int = 0
    substeps: int = 0
    halving_log: list = field(default_factory=list)
    mass_defect: float = 0.0
    rho_min: float = 0.0
    rho_max: float = 0.0
    band_entered: bool = False
    j_min: float = math.nan
    drift: float = math.nan
    cap_active: bool = False
    gs_sweeps: int = 0
    dissipation: dict = field(default_factory=dict)
    dissipated: float = 0.0
    gravity_work: float = 0.0
    substates: list = field(default_factory=list, repr=False)

    def absorb(self, res, tau):
        self.iterations += res.iterations
        self.residual = res.residual_norm
        self.residual0 = max(self.residual0, res.residual0)
        self.target = res.target
        self.damping_events += res.damping_events
        self.linear_iterations += res.linear_iterations
        self.picard_sweeps += res.picard_sweeps


def advance_with_halving(attempt: Callable, old, tau: float, max_halvings: int, stats: SolveStats, depth: int = 0):
    """Run ``attempt(old, tau)``; on solver failure replace it by two half steps."""
    try:
        new = attempt(old, tau, stats)
        stats.substeps += 1
        stats.substates.append((old, new))
        return new
    except (ConvergenceError, ProxConvergenceError, FloatingPointError) as exc:
        msg = f"t={old.time:.6g} tau={tau:.3e}: {exc}"
        stats.halving_log.append(msg)
        log.info("step failed, halving: %s", msg)
        if depth >= max_halvings:
            diag = {"halving_log": list(stats.halving_log)}
            if isinstance(exc, ConvergenceError):
                diag["breakdown"] = exc.breakdown
            raise StepFailure(f"step failed after {depth} halvings: {exc}", diag, old) from exc
        stats.halvings += 1
        mid = advance_with_halving(attempt, old, 0.5 * tau, max_halvings, stats, depth + 1)
        return advance_with_halving(attempt, mid, 0.5 * tau, max_halvings, stats, depth + 1)


def tolerance_scale(x_old) -> float:
    return max(1.0, float(np.linalg.norm(x_old)))


def check_density(state, params, stats):
    rho = state.rho
    stats.rho_min = float(np.min(rho))
    stats.rho_max = float(np.max(rho))
    stats.band_entered = stats.band_entered or stats.rho_max > params.rho_max
    if not (stats.rho_min > 0 and stats.rho_max <= params.rho_max + 1.0):
        raise MaximumPrincipleError(
            f"density bounds violated: min rho={stats.rho_min:.6e}, max rho={stats.rho_max:.6e}, "
            f"allowed (0, {params.rho_max + 1.0}]", {"rho_min": stats.rho_min, "rho_max": stats.rho_max}, state)


def step_small(old: StateSmall, params: SchemeParams, g=None, material: IsotropicQuadraticEnergy | None = None,
               jvp: Callable | None = None):
    """Advance ``old`` by ``params.tau``.

    Returns ``(new, SolveStats)``.  Raises :class:`StepFailure` when Newton
    and all halvings fail and :class:`MaximumPrincipleError` when an accepted
    step leaves ``0 < rho <= rho_max + 1``.
    """
    if material is None:
        raise ValueError("step_small needs the stored-energy material")
    grid = old.grid
    _check_periodic(grid)
    params = resolve_rho_max(params, old.rho)
    stats = SolveStats()
    mass_old = grid.cellsum(old.rho)

    def attempt(state, tau, stats):
        sp = replace(params, tau=tau)
        gvec = gravity_field(g, state.time + 0.5 * tau, grid)
        x_old = state.pack()

        def resid(x):
            return _small_terms(grid, x, x_old, sp, gvec, material)

        res = solve_coupled(resid, x_old, tol_rel=sp.tol_rel, tol_abs=sp.tol_abs * tolerance_scale(x_old),
                            max_iter=sp.max_iter, jvp=jvp, blocks=_blocks_small(grid))
        stats.absorb(res, tau)
        new = StateSmall.unpack(grid, res.x, state.time + tau)
        new.rho, new.p_mom, new.E = new.rho.copy(), new.p_mom.copy(), new.E.copy()
        diss = dissipation_small(new, sp, material)
        stats.dissipation = diss
        stats.dissipated += tau * sum(diss.values())
        stats.gravity_work += tau * grid.inner(new.rho[..., None] * gvec, new.velocity)
        return new

    new = advance_with_halving(attempt, old, params.tau, params.max_halvings, stats)
    check_density(new, params, stats)
    stats.mass_defect = abs(grid.cellsum(new.rho) - mass_old) / abs(mass_old)
    return new, stats
