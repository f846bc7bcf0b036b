"""Implicit step of the regularized finite-strain (Eulerian) viscoelastic model.

Unknowns per cell are ``rho``, ``p``, the distortion ``F``, the independently
evolved Jacobian ``J`` and, for calibrated materials, the auxiliary tensor
``H``.  The inelastic rate ``Pi`` solves the quasi-static problem

    G_M Pi - div(nu |grad Pi|^(q-2) grad Pi) = M,    M = dev(F^T S_F + M_H)

(the sign that makes ``M : Pi = G_M |Pi|^2 + nu |grad Pi|^q`` a dissipation
and matches ``F' = (grad v) F - R F M`` for ``nu = 0``; :func:`solve_pi` is
written for a generic driving tensor and receives ``-M``).  Pi is treated as a dependent unknown: algebraically inside the residual when
``nu = 0``, by block Gauss-Seidel (Pi frozen during a Newton solve, then
refreshed) when ``nu > 0``.  ``G_M = inf`` is the Kelvin-Voigt limit with
``Pi = 0``.

The stored energy is a :class:`~eulervisc.materials.YosidaRegularizedEnergy`
of the packed variable ``U = (F, [H,] J)`` with gradient ``S``.  Momentum uses
the elastic stress ``S_F F^T + T_H + J S_J I`` plus the chain-rule vector
``c_k = S . D_k U`` (the discrete stand-in for the gradient of the energy
density), which pairs exactly with the transport terms ``-(v.D)U``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.linalg import solve_sylvester

from .fields import Field, Grid, _pow_weight
from .materials.energies import MooneyRivlin, calibrated_h
from .materials.stress import h_mandel, h_stress
from .materials.yosida import YosidaRegularizedEnergy
from .solver import ConvergenceError, InfeasibleIterate, solve_coupled
from .stepper_small import (SchemeParams, SolveStats, StepFailure, _check_periodic, advance_with_halving,
                            check_density, density_fluxes, gravity_field, momentum_rhs, resolve_rho_max,
                            tolerance_scale, velocity_dissipation)
from .tensor import cof_prime, det, dev, dev_pack, dev_unpack

__all__ = [
    "StateLarge", "make_initial_large", "solve_pi", "residual_large", "step_large", "kinematic_step",
    "dissipation_large", "stored_energy_large", "effective_material", "JacobianFloorError",
]

log = logging.getLogger(__name__)


class JacobianFloorError(StepFailure):
    """An accepted step produced ``J <= 0``."""


def _t(a):
    return np.swapaxes(a, -1, -2)


# --- state ------------------------------------------------------------------
@dataclass
class StateLarge:
    """Density, momentum, F, J, packed trace-free Pi and optional H on a grid."""

    grid: Grid
    rho: np.ndarray
    p_mom: np.ndarray
    F: np.ndarray
    J: np.ndarray
    Pi: np.ndarray
    H: np.ndarray | None = None
    calibration: str = "none"
    time: float = 0.0

    def __post_init__(self):
        shp = self.grid.shape
        self.rho = np.asarray(self.rho, dtype=float)
        self.p_mom = np.asarray(self.p_mom, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        self.J = np.asarray(self.J, dtype=float)
        self.Pi = np.asarray(self.Pi, dtype=float)
        checks = [("rho", self.rho, ()), ("p_mom", self.p_mom, (3,)), ("F", self.F, (3, 3)), ("J", self.J, ()),
                  ("Pi", self.Pi, (8,))]
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=float)
            checks.append(("H", self.H, (3, 3)))
        for name, arr, tail in checks:
            if arr.shape != shp + tail:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shp + tail}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def velocity(self):
        return self.p_mom / self.rho[..., None]

    @property
    def Pi_matrix(self):
        return dev_unpack(self.Pi)

    def pack(self, with_h: bool | None = None):
        with_h = self.H is not None if with_h is None else with_h
        parts = [self.rho.ravel(), self.p_mom.ravel(), self.F.ravel(), self.J.ravel()]
        if with_h:
            parts.append(self.H.ravel())
        return np.concatenate(parts)

    def fields(self) -> dict:
        out = {"rho": ("scalar", self.rho), "p_mom": ("vector", self.p_mom), "F": ("tensor", self.F),
               "J": ("scalar", self.J), "Pi": ("dev", self.Pi)}
        if self.H is not None:
            out["H"] = ("tensor", self.H)
        return out

    def copy(self):
        return replace(self, rho=self.rho.copy(), p_mom=self.p_mom.copy(), F=self.F.copy(), J=self.J.copy(),
                       Pi=self.Pi.copy(), H=None if self.H is None else self.H.copy())


def _split_large(grid, x, with_h):
    n = grid.ncell
    shp = grid.shape
    rho = x[:n].reshape(shp)
    p = x[n:4 * n].reshape(shp + (3,))
    F = x[4 * n:13 * n].reshape(shp + (3, 3))
    J = x[13 * n:14 * n].reshape(shp)
    H = x[14 * n:23 * n].reshape(shp + (3, 3)) if with_h else None
    return rho, p, F, J, H


def _blocks_large(grid, with_h):
    n = grid.ncell
    out = [("rho", slice(0, n)), ("p", slice(n, 4 * n)), ("F", slice(4 * n, 13 * n)), ("J", slice(13 * n, 14 * n))]
    if with_h:
        out.append(("H", slice(14 * n, 23 * n)))
    return out


def make_initial_large(grid: Grid, rho0, v0, F0, calibration: str = "none", alpha: float = 0.0,
                       time: float = 0.0) -> StateLarge:
    """Initial state with ``p = rho0 v0``, ``J = det F0``, ``H`` calibrated, ``Pi = 0``.

    Raises ``ValueError`` unless ``min det F0 > 0`` and ``min rho0 > 0``.
    """
    shp = grid.shape
    rho0 = np.broadcast_to(np.asarray(rho0, dtype=float), shp).copy()
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), shp + (3,))
    F0 = np.broadcast_to(np.asarray(F0, dtype=float), shp + (3, 3)).copy()
    if not np.min(rho0) > 0:
        raise ValueError("initial density must satisfy min rho0 > 0")
    J0 = det(F0)
    if not np.min(J0) > 0:
        raise ValueError(f"initial distortion must satisfy min det F0 > 0 (got {np.min(J0):.3e})")
    H0 = None if calibration == "none" else calibrated_h(F0, J0, calibration, alpha)
    return StateLarge(grid, rho0, rho0[..., None] * v0, F0, J0, np.zeros(shp + (8,)), H0, calibration, time)


# --- material helpers -------------------------------------------------------
def effective_material(reg: YosidaRegularizedEnergy) -> YosidaRegularizedEnergy:
    """Drop the auxiliary tensor from the coupled solve when it carries no energy.

    A Mooney-Rivlin law with ``G_MR = 0`` is neo-Hookean; its H is then only
    transported passively after each step.
    """
    base = reg.base
    if isinstance(base, MooneyRivlin) and not base.uses_h:
        return replace(reg, base=base.without_h())
    return reg


def stored_energy_large(state: StateLarge, reg: YosidaRegularizedEnergy) -> float:
    """``sum phi_reg(F, [H,] J) h^d``."""
    reg = effective_material(reg)
    U = reg.base.pack(state.F, state.J, state.H if reg.base.has_h else None)
    return state.grid.integrate(reg.value(U))


# --- the inelastic rate -------------------------------------------------------
def _pi_flux(grid, Pi, nu, q_exp):
    gp = grid.grad(Pi)
    return nu * _pow_weight(gp, q_exp, 3) * gp, gp


def solve_pi(M, nu: float, q_exp: float, G_M: float, grid: Grid | None = None, Pi0=None,
             tol_rel: float = 1e-13, tol_abs: float = 1e-15):
    """Trace-free Pi (8-entry packed storage) from ``G_M Pi = div(nu |grad Pi|^(q-2) grad Pi) - M``.

    ``nu = 0`` is the pointwise rule ``Pi = -dev(M) / G_M``; ``G_M = inf``
    gives ``Pi = 0``.  For ``nu > 0`` the strictly monotone system is solved
    by Newton-Krylov with its exact Jacobian-vector product.
    """
    if isinstance(M, Field):
        grid, M = M.grid, M.values
    M = np.asarray(M, dtype=float)
    if not G_M > 0:
        raise ValueError("solve_pi needs G_M > 0")
    if nu < 0:
        raise ValueError("solve_pi needs nu >= 0")
    if math.isinf(G_M):
        return np.zeros(M.shape[:-2] + (8,))
    Md = dev(M)
    if nu == 0:
        return dev_pack(-Md / G_M)
    if grid is None:
        raise ValueError("nu > 0 needs the grid")
    if not q_exp > 3:
        raise ValueError(f"plastic-gradient exponent must satisfy q > 3, got {q_exp}")
    shp = M.shape[:-2]

    def resid(y):
        Pi = dev_unpack(y.reshape(shp + (8,)))
        flux, _ = _pi_flux(grid, Pi, nu, q_exp)
        return dev_pack(G_M * Pi - grid.div(flux) + Md).ravel()

    def jvp(y, r, w):
        Pi = dev_unpack(y.reshape(shp + (8,)))
        W = dev_unpack(w.reshape(shp + (8,)))
        gp = grid.grad(Pi)
        gw = grid.grad(W)
        s = np.sum(gp * gp, axis=(-3, -2, -1))[..., None, None, None]
        c = np.sum(gp * gw, axis=(-3, -2, -1))[..., None, None, None]
        dflux = nu * (s ** ((q_exp - 2.0) / 2.0) * gw + (q_exp - 2.0) * s ** ((q_exp - 4.0) / 2.0) * c * gp)
        return dev_pack(G_M * W - grid.div(dflux)).ravel()

    y0 = dev_pack(-Md / G_M).ravel() if Pi0 is None else np.asarray(Pi0, dtype=float).ravel()
    scale = max(1.0, float(np.linalg.norm(y0)))
    # q = 4 keeps the Jacobian smooth at grad Pi = 0; for other q the s**((q-4)/2) factor needs s > 0
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            res = solve_coupled(resid, y0, tol_rel=tol_rel, tol_abs=tol_abs * scale,
                                jvp=jvp if q_exp >= 4 else None)
    except ConvergenceError as exc:
        raise ConvergenceError(f"inelastic-rate solve failed: {exc}", exc.result, exc.breakdown) from exc
    return res.x.reshape(shp + (8,))


# --- kinematics ---------------------------------------------------------------
def _kinematic_sources(F, J, H, L, Pi, calibration, alpha):
    """Local (transport-free) rates of F, J and H for velocity gradient ``L``."""
    divv = np.trace(L, axis1=-2, axis2=-1)
    LF = L @ F
    FPi = F @ Pi
    sF = LF - FPi
    sJ = divv * J
    sH = None
    if calibration == "cof":
        sH = cof_prime(F, sF)
    elif calibration == "jalpha":
        sH = alpha * divv[..., None, None] * H + L @ H - H @ Pi
    elif calibration == "mooney_rivlin":
        sH = J[..., None, None] ** (-7.0 / 6.0) * cof_prime(F, sF) - (7.0 / 6.0) * divv[..., None, None] * H
    return sF, sJ, sH


def kinematic_step(F_old, J_old, grad_v, tau: float, Pi=None, H_old=None, calibration: str = "none",
                   alpha: float = 0.0):
    """Backward-Euler update of ``(F, J, H)`` for a spatially uniform, prescribed velocity gradient.

    The single-cell reduction of the F, J and H equations; F solves the
    Sylvester equation ``(I - tau L) F + F (tau Pi) = F_old``.
    """
    L = np.asarray(grad_v, dtype=float)
    Pi = np.zeros((3, 3)) if Pi is None else np.asarray(Pi, dtype=float)
    F = solve_sylvester(np.eye(3) - tau * L, tau * Pi, np.asarray(F_old, dtype=float))
    J = float(J_old) / (1.0 - tau * np.trace(L))
    H = None
    if calibration != "none":
        H_old = np.asarray(H_old, dtype=float)

        def resid(h):
            Hm = h.reshape(3, 3)
            sH = _kinematic_sources(F, np.asarray(J), Hm, L, Pi, calibration, alpha)[2]
            return (Hm - H_old - tau * sH).ravel()

        H = solve_coupled(resid, H_old.ravel(), tol_rel=1e-14, tol_abs=1e-15).x.reshape(3, 3)
    return F, J, H


# --- residual -----------------------------------------------------------------
def _large_terms(grid, x, old_x, params, gvec, reg, Pi_packed=None, with_h=None, out=None):
    """Residual of the coupled system; ``Pi_packed=None`` resolves Pi pointwise from M."""
    base = reg.base
    with_h = base.has_h if with_h is None else with_h
    rho, p, F, J, H = _split_large(grid, x, with_h)
    if not np.all(rho > 0):
        raise InfeasibleIterate(f"nonpositive density inside Newton (min rho = {np.min(rho):.3e})")
    if not np.all(J > 0):
        raise InfeasibleIterate(f"nonpositive J inside Newton (min J = {np.min(J):.3e})")
    rho_o, p_o, F_o, J_o, H_o = _split_large(grid, old_x, with_h)
    tau = params.tau
    v = p / rho[..., None]
    gv = grid.grad(v)

    U = base.pack(F, J, H)
    val, S = reg.evaluate(U)
    sF, sH, sJ = base.unpack(S)
    T_el = sF @ _t(F) + h_stress(base, F, H, J, sH) + (J * sJ)[..., None, None] * np.eye(3)
    M = dev(_t(F) @ sF + h_mandel(base, F, H, J, sH))
    if Pi_packed is None:
        Pi_packed = solve_pi(-M, 0.0, params.q_exp, params.G_M)
    Pi = dev_unpack(Pi_packed)

    gU = grid.grad(U)
    chain = np.einsum("...a,...ak->...k", S, gU)
    trans = np.einsum("...ak,...k->...a", gU, v)
    tF, tH, tJ = base.unpack(trans)
    q, m = density_fluxes(grid, rho, p, params)

    srcF, srcJ, srcH = _kinematic_sources(F, J, H, gv, Pi, base.calibration, base.alpha)
    rhsF = srcF - tF
    rhsJ = srcJ - tJ
    rhsH = None if H is None else srcH - tH
    if params.delta > 0:
        lF, lH, lJ = base.unpack(grid.laplacian(U))
        rhsF = rhsF + params.delta * lF
        rhsJ = rhsJ + params.delta * lJ
        if H is not None:
            rhsH = rhsH + params.delta * lH

    r = [rho - rho_o - tau * grid.div(q - m),
         p - p_o - tau * momentum_rhs(grid, rho, v, gv, q, m, T_el, chain, params, gvec),
         F - F_o - tau * rhsF,
         J - J_o - tau * rhsJ]
    if H is not None:
        r.append(H - H_o - tau * rhsH)
    if out is not None:
        out.update(M=M, Pi=Pi_packed, S=S, U=U, value=val)
    return np.concatenate([a.ravel() for a in r])


def _passive_h(grid, state_old, new, params):
    """Transport H after the coupled solve (H carries no energy)."""
    reg_cal = "mooney_rivlin"
    F, J, v = new.F, new.J, new.velocity
    gv = grid.grad(v)
    Pi = new.Pi_matrix

    def resid(h):
        H = h.reshape(grid.shape + (3, 3))
        sH = _kinematic_sources(F, J, H, gv, Pi, reg_cal, 0.0)[2]
        gH = grid.grad(H)
        rhs = sH - np.einsum("...ijk,...k->...ij", gH, v)
        if params.delta > 0:
            rhs = rhs + params.delta * grid.laplacian(H)
        return (H - state_old.H - params.tau * rhs).ravel()

    h0 = state_old.H.ravel()
    res = solve_coupled(resid, h0, tol_rel=params.tol_rel, tol_abs=params.tol_abs * tolerance_scale(h0))
    return res.x.reshape(grid.shape + (3, 3)).copy()


def residual_large(new: StateLarge, old: StateLarge, params: SchemeParams, material: YosidaRegularizedEnergy, g=None):
    """Residual ``[rho | p | F | J | H?]`` of one step; Pi is taken from ``new`` when ``nu > 0``.

    With ``nu = 0`` Pi is the pointwise function of the new state, so the
    Pi-equation holds by construction.
    """
    grid = old.grid
    _check_periodic(grid)
    if params.rho_max is None:
        raise ValueError("rho_max must be resolved before stepping")
    reg = effective_material(material)
    gvec = gravity_field(g, old.time + 0.5 * params.tau, grid)
    with_h = reg.base.has_h
    Pi = new.Pi if params.nu > 0 else None
    return _large_terms(grid, new.pack(with_h), old.pack(with_h), params, gvec, reg, Pi, with_h)


def _unpack_state(grid, x, template: StateLarge, with_h, Pi, time):
    rho, p, F, J, H = _split_large(grid, x, with_h)
    return StateLarge(grid, rho.copy(), p.copy(), F.copy(), J.copy(), np.array(Pi, dtype=float),
                      H.copy() if with_h else template.H, template.calibration, time)


def dissipation_large(state: StateLarge, params: SchemeParams, material: YosidaRegularizedEnergy) -> dict:
    grid = state.grid
    reg = effective_material(material)
    v = state.velocity
    gv = grid.grad(v)
    out = velocity_dissipation(grid, v, gv, params)
    if math.isinf(params.G_M):
        out["maxwell"] = 0.0
    else:
        Pi = state.Pi_matrix
        maxwell = params.G_M * grid.inner(Pi, Pi)
        if params.nu > 0:
            flux, gp = _pi_flux(grid, Pi, params.nu, params.q_exp)
            maxwell += grid.inner(flux, gp)
        out["maxwell"] = maxwell
    if params.delta > 0:
        U = reg.base.pack(state.F, state.J, state.H if reg.base.has_h else None)
        S = reg.grad(U)
        out["delta_grad"] = params.delta * grid.inner(grid.grad(S), grid.grad(U))
    else:
        out["delta_grad"] = 0.0
    return out


def step_large(old: StateLarge, params: SchemeParams, material: YosidaRegularizedEnergy, g=None,
               jvp: Callable | None = None, max_sweeps: int = 30):
    """Advance ``old`` by ``params.tau``; returns ``(new, SolveStats)``.

    Post-hoc checks: density bounds as for the small model and ``J > 0``.
    The drift ``|J - det F|_inf`` and cap activity are reported in the stats.
    """
    grid = old.grid
    _check_periodic(grid)
    params = resolve_rho_max(params, old.rho)
    bad = params.unsafe_flags(large=True)
    if bad and not params.allow_unsafe:
        raise ValueError("scheme parameters outside the analysed regime: " + "; ".join(bad))
    reg0 = effective_material(material)
    passive_h = reg0.base is not material.base and old.H is not None
    with_h = reg0.base.has_h
    stats = SolveStats()
    mass_old = grid.cellsum(old.rho)

    def attempt(state, tau, stats):
        sp = replace(params, tau=tau)
        reg = reg0
        if reg.mode == "simplified-cap":
            reg = reg.with_floor(0.5 * float(np.min(state.J)))
        gvec = gravity_field(g, state.time + 0.5 * tau, grid)
        x_old = state.pack(with_h)
        target_abs = sp.tol_abs * tolerance_scale(x_old)
        blocks = _blocks_large(grid, with_h)

        if sp.nu == 0 or math.isinf(sp.G_M):
            def resid(x):
                return _large_terms(grid, x, x_old, sp, gvec, reg, None, with_h)

            res = solve_coupled(resid, x_old, tol_rel=sp.tol_rel, tol_abs=target_abs, max_iter=sp.max_iter,
                                jvp=jvp, blocks=blocks)
            stats.absorb(res, tau)
            info = {}
            _large_terms(grid, res.x, x_old, sp, gvec, reg, None, with_h, out=info)
            x, Pi = res.x, info["Pi"]
        else:
            info = {}
            _large_terms(grid, x_old, x_old, sp, gvec, reg, state.Pi, with_h, out=info)
            Pi = solve_pi(-info["M"], sp.nu, sp.q_exp, sp.G_M, grid, Pi0=state.Pi)
            r0 = float(np.linalg.norm(_large_terms(grid, x_old, x_old, sp, gvec, reg, Pi, with_h)))
            target = target_abs + sp.tol_rel * r0
            x = x_old
            for sweep in range(1, max_sweeps + 1):
                def resid(y, Pi=Pi):
                    return _large_terms(grid, y, x_old, sp, gvec, reg, Pi, with_h)

                res = solve_coupled(resid, x, tol_rel=0.0, tol_abs=0.1 * target, max_iter=sp.max_iter, jvp=jvp,
                                    blocks=blocks)
                stats.absorb(res, tau)
                x = res.x
                info = {}
                _large_terms(grid, x, x_old, sp, gvec, reg, Pi, with_h, out=info)
                Pi = solve_pi(-info["M"], sp.nu, sp.q_exp, sp.G_M, grid, Pi0=Pi)
                rn = float(np.linalg.norm(_large_terms(grid, x, x_old, sp, gvec, reg, Pi, with_h)))
                stats.gs_sweeps += 1
                stats.residual, stats.residual0, stats.target = rn, max(stats.residual0, r0), target
                if rn <= target:
                    break
            else:
                raise ConvergenceError(f"block Gauss-Seidel for Pi did not converge in {max_sweeps} sweeps "
                                       f"(|R|={rn:.3e}, target {target:.3e})")

        new = _unpack_state(grid, x, state, with_h, Pi, state.time + tau)
        if passive_h:
            new.H = _passive_h(grid, state, new, sp)
        if reg.mode == "simplified-cap":
            stats.cap_active = stats.cap_active or bool(np.any(reg.cap_active(reg.base.pack(new.F, new.J))))
        diss = dissipation_large(new, sp, reg)
        stats.dissipation = diss
        stats.dissipated += tau * sum(diss.values())
        stats.gravity_work += tau * grid.inner(new.rho[..., None] * gvec, new.velocity)
        return new

    new = advance_with_halving(attempt, old, params.tau, params.max_halvings, stats)
    check_density(new, params, stats)
    stats.j_min = float(np.min(new.J))
    if not stats.j_min > 0:
        raise JacobianFloorError(f"J <= 0 after accepted step (min J = {stats.j_min:.3e})",
                                 {"j_min": stats.j_min}, new)
    stats.drift = float(np.max(np.abs(new.J - det(new.F))))
    stats.mass_defect = abs(grid.cellsum(new.rho) - mass_old) / abs(mass_old)
    return new, stats
