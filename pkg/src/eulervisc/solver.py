"""Damped inexact Newton-Krylov solver for the implicit steps.

Each step of either scheme is a nonlinear system ``R(x) = 0``.  Newton
directions come from restarted GMRES (scipy) on Jacobian-vector products,
which are analytic when the caller supplies them and forward differences
otherwise.  Globalisation is Armijo backtracking on ``|R|^2``; a stalled
line search falls back to Picard sweeps ``x <- x - R(x)`` before giving up.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

__all__ = [
    "NewtonResult", "ConvergenceError", "SingularJacobianError", "InfeasibleIterate", "solve_coupled",
    "picard_sweep",
]

log = logging.getLogger(__name__)

_SQRT_EPS = np.sqrt(np.finfo(float).eps)


class InfeasibleIterate(ValueError):
    """Raised by a residual when the iterate leaves the admissible set (rho <= 0, J <= 0)."""


class ConvergenceError(RuntimeError):
    """Newton (and its fallbacks) failed; carries the last iterate and a residual breakdown."""

    def __init__(self, message, result=None, breakdown=None):
        super().__init__(message)
        self.result = result
        self.breakdown = breakdown or {}


class SingularJacobianError(ConvergenceError):
    pass


@dataclass
class NewtonResult:
    x: np.ndarray
    converged: bool
    iterations: int = 0
    residual_norm: float = 0.0
    residual0: float = 0.0
    target: float = 0.0
    damping_events: int = 0
    linear_iterations: int = 0
    picard_sweeps: int = 0
    history: list = field(default_factory=list)


def _breakdown(r, blocks):
    if not blocks:
        return {"all": float(np.linalg.norm(r))}
    return {name: float(np.linalg.norm(r[sl])) for name, sl in blocks}


def picard_sweep(residual, x, sweeps: int = 5, omega: float = 1.0):
    """Fixed-point sweeps ``x <- x - omega R(x)``, kept only while |R| decreases."""
    r = residual(x)
    rn = np.linalg.norm(r)
    done = 0
    for _ in range(sweeps):
        try:
            xt = x - omega * r
            rt = residual(xt)
        except InfeasibleIterate:
            break
        rtn = np.linalg.norm(rt)
        if not rtn < rn:
            break
        x, r, rn = xt, rt, rtn
        done += 1
    return x, r, done


def solve_coupled(residual: Callable[[np.ndarray], np.ndarray], x0, tol_rel: float = 1e-10,
                  tol_abs: float = 1e-12, max_iter: int = 50, jvp: Callable | None = None,
                  precond=None, blocks: Sequence | None = None, restart: int = 40,
                  max_krylov: int = 400, picard: bool = True) -> NewtonResult:
    """Solve ``residual(x) = 0`` starting from ``x0``.

    Parameters
    ----------
    residual : callable
        Maps a flat array to a flat array of the same size.  May raise
        :class:`InfeasibleIterate`, which the line search treats as a failed trial.
    tol_rel, tol_abs : float
        Stop when ``|R(x)| <= tol_abs + tol_rel |R(x0)|``.
    jvp : callable, optional
        ``jvp(x, r, w)`` returning ``R'(x) w``; finite differences otherwise.
    precond : LinearOperator, optional
        Right-hand preconditioner passed to GMRES.
    blocks : sequence of (name, slice), optional
        Equation blocks for the residual breakdown carried by errors.

    Returns
    -------
    NewtonResult

    Raises
    ------
    ConvergenceError
        After ``max_iter`` iterations or a failed line search and Picard fallback.
    SingularJacobianError
        When the Krylov solve returns no usable direction.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    rn = float(np.linalg.norm(r))
    res = NewtonResult(x=x, converged=False, residual0=rn, target=tol_abs + tol_rel * rn)
    res.history.append(rn)
    n = x.size
    # forward-difference products carry ~1e-8 relative noise; asking GMRES
    # for more than 1e-6 only burns iterations
    eta_floor = 1e-12 if jvp is not None else 1e-6

    while rn > res.target:
        if res.iterations >= max_iter:
            res.x, res.residual_norm = x, rn
            raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (|R|={rn:.3e})",
                                   res, _breakdown(r, blocks))
        res.iterations += 1

        if jvp is not None:
            def matvec(w, x=x, r=r):
                return jvp(x, r, w)
        else:
            xnorm = np.linalg.norm(x)

            def matvec(w, x=x, r=r, xnorm=xnorm):
                wn = np.linalg.norm(w)
                if wn == 0:
                    return np.zeros_like(w)
                h = _SQRT_EPS * (1.0 + xnorm) / wn
                try:
                    return (residual(x + h * w) - r) / h
                except InfeasibleIterate:
                    return (r - residual(x - h * w)) / h

        A = LinearOperator((n, n), matvec=matvec, dtype=float)
        eta = float(np.clip(0.1 * res.target / rn, eta_floor, 1e-3))
        counter = [0]

        def cb(_, counter=counter):
            counter[0] += 1

        d, info = gmres(A, -r, rtol=eta, atol=0.0, restart=min(restart, n), maxiter=max(1, max_krylov // restart),
                        M=precond, callback=cb, callback_type="pr_norm")
        res.linear_iterations += counter[0]
        if not np.all(np.isfinite(d)) or not np.any(d):
            res.x, res.residual_norm = x, rn
            raise SingularJacobianError("Krylov solve produced no usable Newton direction", res,
                                        _breakdown(r, blocks))

        lam = 1.0
        accepted = False
        while lam >= 1e-6:
            try:
                xt = x + lam * d
                rt = residual(xt)
                rtn = float(np.linalg.norm(rt))
            except InfeasibleIterate:
                rtn = np.inf
            if rtn * rtn <= (1.0 - 2e-4 * lam) * rn * rn:
                accepted = True
                break
            lam *= 0.5
            res.damping_events += 1

        if accepted:
            x, r, rn = xt, rt, rtn
        elif picard:
            x, r, swept = picard_sweep(residual, x)
            res.picard_sweeps += swept
            new_rn = float(np.linalg.norm(r))
            if swept == 0 or not new_rn < rn:
                res.x, res.residual_norm = x, new_rn
                raise ConvergenceError(f"line search and Picard fallback stalled at |R|={new_rn:.3e}", res,
                                       _breakdown(r, blocks))
            rn = new_rn
        else:
            res.x, res.residual_norm = x, rn
            raise ConvergenceError(f"line search stalled at |R|={rn:.3e}", res, _breakdown(r, blocks))
        res.history.append(rn)
        log.debug("newton it=%d |R|=%.3e lam=%.3g krylov=%d", res.iterations, rn, lam, counter[0])

    res.x, res.residual_norm, res.converged = x, rn, True
    return res
